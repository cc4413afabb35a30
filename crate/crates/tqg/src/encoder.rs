//! The geometric encoder: a dense stack feeding two graph convolutions (each
//! optionally followed by GraphNorm), then a two-layer projection head. It is
//! pre-trained contrastively over stochastic subgraph pairs; the row of the
//! anchor node is the embedding readout.

use std::path::Path;

use rand::seq::SliceRandom;

use crate::features::{AmenityIndex, FeatureSpec, ScalerBounds};
use crate::nn::{
    derive_rng, glorot_uniform, normalize_adjacency, ntxent_loss, ParamStore, Tape, Tensor2, Var,
};
use crate::osm::RoadGraph;
use crate::quotient::QuotientGraph;
use crate::sampler::{bfs_subgraph, make_pair, sample_representatives};
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct EncoderConfig {
    /// input feature count (matches the FeatureSpec)
    pub d_f: usize,
    /// width of the dense stack before the graph convolutions
    pub hidden_dim: usize,
    pub d_fc1: usize,
    pub d_fc2: usize,
    pub use_graphnorm: bool,
    pub n_gcn_layers: usize,
    pub temperature: f64,
    pub learning_rate: f64,
    /// contrastive batch: sensors per pre-training step
    pub batch_b: usize,
    pub pre_epochs: usize,
    /// BFS truncation size; `None` keeps whole components
    pub n_max: Option<usize>,
    /// mean-pool readout instead of the anchor row
    pub mean_pool_readout: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_f: 2,
            hidden_dim: 320,
            d_fc1: 64,
            d_fc2: 32,
            use_graphnorm: true,
            n_gcn_layers: 2,
            temperature: 0.5,
            learning_rate: 3e-4,
            batch_b: 64,
            pre_epochs: 50,
            n_max: Some(64),
            mean_pool_readout: false,
        }
    }
}

impl EncoderConfig {
    fn bfs_cap(&self) -> usize {
        self.n_max.unwrap_or(usize::MAX)
    }
}

pub struct Encoder {
    pub cfg: EncoderConfig,
    pub params: ParamStore,
}

struct Bound {
    w_in: Var,
    b_in: Var,
    gcn: Vec<GcnVars>,
    w_fc1: Var,
    b_fc1: Var,
    w_fc2: Var,
    b_fc2: Var,
}

struct GcnVars {
    w: Var,
    norm: Option<(Var, Var, Var)>, // alpha, gamma, beta
}

impl Encoder {
    /// Seeded Glorot init; GraphNorm starts at α=1, γ=1, β=0.
    pub fn init(cfg: EncoderConfig, seed: u64) -> Self {
        let mut rng = derive_rng(seed, &[0xE2C]);
        let mut params = ParamStore::new();
        params.insert("enc.in.w", glorot_uniform(cfg.d_f, cfg.hidden_dim, &mut rng));
        params.insert("enc.in.b", Tensor2::zeros(1, cfg.hidden_dim));
        for l in 0..cfg.n_gcn_layers {
            params.insert(
                &format!("enc.gcn{l}.w"),
                glorot_uniform(cfg.hidden_dim, cfg.hidden_dim, &mut rng),
            );
            if cfg.use_graphnorm {
                params.insert(&format!("enc.gn{l}.alpha"), Tensor2::filled(1, cfg.hidden_dim, 1.0));
                params.insert(&format!("enc.gn{l}.gamma"), Tensor2::filled(1, cfg.hidden_dim, 1.0));
                params.insert(&format!("enc.gn{l}.beta"), Tensor2::zeros(1, cfg.hidden_dim));
            }
        }
        params.insert("enc.fc1.w", glorot_uniform(cfg.hidden_dim, cfg.d_fc1, &mut rng));
        params.insert("enc.fc1.b", Tensor2::zeros(1, cfg.d_fc1));
        params.insert("enc.fc2.w", glorot_uniform(cfg.d_fc1, cfg.d_fc2, &mut rng));
        params.insert("enc.fc2.b", Tensor2::zeros(1, cfg.d_fc2));
        Encoder { cfg, params }
    }

    fn bind(&self, tape: &mut Tape) -> Bound {
        let p = &self.params;
        Bound {
            w_in: tape.input(p.get("enc.in.w").clone()),
            b_in: tape.input(p.get("enc.in.b").clone()),
            gcn: (0..self.cfg.n_gcn_layers)
                .map(|l| GcnVars {
                    w: tape.input(p.get(&format!("enc.gcn{l}.w")).clone()),
                    norm: self.cfg.use_graphnorm.then(|| {
                        (
                            tape.input(p.get(&format!("enc.gn{l}.alpha")).clone()),
                            tape.input(p.get(&format!("enc.gn{l}.gamma")).clone()),
                            tape.input(p.get(&format!("enc.gn{l}.beta")).clone()),
                        )
                    }),
                })
                .collect(),
            w_fc1: tape.input(p.get("enc.fc1.w").clone()),
            b_fc1: tape.input(p.get("enc.fc1.b").clone()),
            w_fc2: tape.input(p.get("enc.fc2.w").clone()),
            b_fc2: tape.input(p.get("enc.fc2.b").clone()),
        }
    }

    fn bound_vars(bound: &Bound, cfg: &EncoderConfig) -> Vec<Var> {
        let mut vars = vec![bound.w_in, bound.b_in];
        for g in &bound.gcn {
            vars.push(g.w);
            if cfg.use_graphnorm {
                let (a, ga, be) = g.norm.unwrap();
                vars.extend([a, ga, be]);
            }
        }
        vars.extend([bound.w_fc1, bound.b_fc1, bound.w_fc2, bound.b_fc2]);
        vars
    }

    /// Dense → ReLU → (GCN → [GraphNorm] → ReLU)ⁿ → Dense → ReLU → Dense,
    /// all on the tape; returns the |g|×d_FC2 output rows.
    fn forward_on(&self, tape: &mut Tape, bound: &Bound, features: Var, s_norm: Var) -> Var {
        let mut h = tape.matmul(features, bound.w_in);
        h = tape.add_bias(h, bound.b_in);
        h = tape.relu(h);
        for g in &bound.gcn {
            let sh = tape.matmul(s_norm, h);
            h = tape.matmul(sh, g.w);
            if let Some((alpha, gamma, beta)) = g.norm {
                h = tape.graphnorm(h, alpha, gamma, beta);
            }
            h = tape.relu(h);
        }
        h = tape.matmul(h, bound.w_fc1);
        h = tape.add_bias(h, bound.b_fc1);
        h = tape.relu(h);
        h = tape.matmul(h, bound.w_fc2);
        tape.add_bias(h, bound.b_fc2)
    }

    fn readout(&self, tape: &mut Tape, rows: Var) -> Var {
        if self.cfg.mean_pool_readout {
            let k = tape.value(rows).rows();
            let ones = tape.input(Tensor2::filled(1, k, 1.0 / k as f64));
            tape.matmul(ones, rows)
        } else {
            tape.pick_row(rows, 0)
        }
    }

    /// One deterministic forward pass over a rooted subgraph. Row 0 of the
    /// feature matrix must be the anchor node.
    pub fn forward(&self, features: &Tensor2, adjacency: &[bool]) -> Result<(Vec<f64>, Tensor2)> {
        let k = features.rows();
        if features.cols() != self.cfg.d_f {
            return Err(Error::ShapeMismatch(format!(
                "expected {} feature columns, got {}",
                self.cfg.d_f,
                features.cols()
            )));
        }
        if adjacency.len() != k * k {
            return Err(Error::ShapeMismatch(format!(
                "adjacency has {} cells for {k} nodes",
                adjacency.len()
            )));
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let f = tape.input(features.clone());
        let s = tape.input(normalize_adjacency(adjacency, k));
        let rows = self.forward_on(&mut tape, &bound, f, s);
        let root = self.readout(&mut tape, rows);
        Ok((
            tape.value(root).row(0).to_vec(),
            tape.value(rows).clone(),
        ))
    }
}

/// Disjoint sensor-index lists for pre-training.
#[derive(Clone, Debug)]
pub struct NodeSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffled 70/10/20 node split over `n` sensors. The validation list is
/// floored at two sensors (the smallest contrastive batch).
pub fn node_split(n: usize, seed: u64) -> NodeSplit {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut derive_rng(seed, &[0x5711]));
    let n_train = (0.7 * n as f64).floor() as usize;
    let n_val = ((0.1 * n as f64).floor() as usize).max(2).min(n.saturating_sub(n_train));
    NodeSplit {
        train: order[..n_train].to_vec(),
        val: order[n_train..n_train + n_val].to_vec(),
        test: order[n_train + n_val..].to_vec(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Contrastive pre-training (NT-Xent over anchor embeddings of B subgraph
/// pairs per epoch, Adam updates, best-on-validation weights retained).
///
/// Validation pairs are fixed across epochs so the best-checkpoint rule
/// compares like with like.
#[allow(clippy::too_many_arguments)]
pub fn pretrain(
    q: &QuotientGraph,
    road: &RoadGraph,
    amenities: &AmenityIndex,
    spec: &FeatureSpec,
    bounds: &ScalerBounds,
    cfg: EncoderConfig,
    split: &NodeSplit,
    seed: u64,
) -> Result<(Encoder, Vec<EpochLoss>)> {
    if split.train.len() < 2 {
        return Err(Error::DegenerateBatch(split.train.len()));
    }
    if split.val.is_empty() {
        return Err(Error::ParameterOutOfRange("empty validation node list".into()));
    }
    if cfg.batch_b < 2 {
        return Err(Error::DegenerateBatch(cfg.batch_b));
    }

    let mut encoder = Encoder::init(cfg, seed);
    let b_train = encoder.cfg.batch_b.min(split.train.len());
    let val_batch: Vec<usize> = {
        let mut v = split.val.clone();
        v.shuffle(&mut derive_rng(seed, &[0x7a1]));
        v.truncate(encoder.cfg.batch_b.max(2).min(v.len()));
        v
    };

    let mut history = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut best_snapshot = encoder.params.snapshot();

    for epoch in 0..encoder.cfg.pre_epochs {
        // fresh stochastic pairs for a shuffled batch of train sensors
        let mut order = split.train.clone();
        order.shuffle(&mut derive_rng(seed, &[1, epoch as u64]));
        let batch = &order[..b_train];
        let pair_seed = derive_rng_seed(seed, 2, epoch as u64);

        let (train_loss, grads) =
            contrastive_loss(&encoder, q, road, amenities, spec, bounds, batch, pair_seed, true)?;
        let grads = grads.expect("gradients requested");
        encoder.params.zero_grads();
        for (name, g) in &grads {
            encoder.params.accumulate_grad(name, g);
        }
        encoder.params.adam_step(encoder.cfg.learning_rate);

        let val_seed = derive_rng_seed(seed, 3, 0);
        let (val_loss, _) =
            contrastive_loss(&encoder, q, road, amenities, spec, bounds, &val_batch, val_seed, false)?;

        if val_loss < best_val {
            best_val = val_loss;
            best_snapshot = encoder.params.snapshot();
        }
        history.push(EpochLoss {
            epoch,
            train_loss,
            val_loss,
        });
    }

    encoder.params.restore(&best_snapshot);
    Ok((encoder, history))
}

fn derive_rng_seed(base: u64, tag: u64, epoch: u64) -> u64 {
    use rand::RngCore;
    derive_rng(base, &[tag, epoch]).next_u64()
}

/// NT-Xent over one batch of sensor roots (the pre-training step primitive):
/// the scalar loss and, when requested, the gradient with respect to every
/// encoder parameter by name.
#[allow(clippy::too_many_arguments)]
pub fn contrastive_loss(
    encoder: &Encoder,
    q: &QuotientGraph,
    road: &RoadGraph,
    amenities: &AmenityIndex,
    spec: &FeatureSpec,
    bounds: &ScalerBounds,
    batch: &[usize],
    pair_seed: u64,
    with_grads: bool,
) -> Result<(f64, Option<Vec<(String, Tensor2)>>)> {
    if batch.len() < 2 {
        return Err(Error::DegenerateBatch(batch.len()));
    }
    let mut tape = Tape::new();
    let bound = encoder.bind(&mut tape);
    let mut roots1 = Vec::with_capacity(batch.len());
    let mut roots2 = Vec::with_capacity(batch.len());
    for &root in batch {
        let pair = make_pair(
            q,
            road,
            amenities,
            spec,
            bounds,
            root,
            encoder.cfg.bfs_cap(),
            pair_seed,
        )?;
        let k = pair.subgraph.len();
        let s = tape.input(normalize_adjacency(&pair.subgraph.adj, k));
        let f1 = tape.input(pair.f1);
        let f2 = tape.input(pair.f2);
        let rows1 = encoder.forward_on(&mut tape, &bound, f1, s);
        let rows2 = encoder.forward_on(&mut tape, &bound, f2, s);
        roots1.push(encoder.readout(&mut tape, rows1));
        roots2.push(encoder.readout(&mut tape, rows2));
    }
    let z1 = tape.concat_rows(&roots1);
    let z2 = tape.concat_rows(&roots2);
    let loss = ntxent_loss(&mut tape, z1, z2, encoder.cfg.temperature)?;
    let loss_value = tape.value(loss).item();
    if !with_grads {
        return Ok((loss_value, None));
    }
    let grads = tape.backward(loss);
    let vars = Encoder::bound_vars(&bound, &encoder.cfg);
    let collected = encoder
        .params
        .names()
        .zip(&vars)
        .map(|(name, &v)| (name.to_string(), grads.wrt(&tape, v)))
        .collect();
    Ok((loss_value, Some(collected)))
}

/// One deterministic embedding per sensor from a single fixed representative
/// draw. Independent per sensor; iteration order cannot matter.
pub fn embed_all(
    encoder: &Encoder,
    q: &QuotientGraph,
    road: &RoadGraph,
    amenities: &AmenityIndex,
    spec: &FeatureSpec,
    bounds: &ScalerBounds,
    seed: u64,
) -> Result<Tensor2> {
    let draw = sample_representatives(q, derive_rng_seed(seed, 9, 0));
    let mut out = Tensor2::zeros(q.n(), encoder.cfg.d_fc2);
    for sensor in 0..q.n() {
        let subgraph = bfs_subgraph(q, sensor, encoder.cfg.bfs_cap())?;
        let ids: Vec<i64> = subgraph
            .nodes
            .iter()
            .map(|&s| road.nodes()[draw.representative_of[s]].id)
            .collect();
        let raw = crate::features::extract_raw_features_indexed(road, amenities, &ids, spec)?;
        let scaled = crate::features::apply_scaler(&raw, bounds)?;
        let (root_emb, _) = encoder.forward(&scaled.values, &subgraph.adj)?;
        for (j, v) in root_emb.iter().enumerate() {
            out[(sensor, j)] = *v;
        }
    }
    Ok(out)
}

/// Loss-history CSV: `epoch,train_loss,val_loss`.
pub fn write_loss_csv(history: &[EpochLoss], path: &Path) -> Result<()> {
    crate::osm::write_csv(
        path,
        &["epoch", "train_loss", "val_loss"],
        history.iter().map(|e| {
            vec![
                e.epoch.to_string(),
                crate::osm::fmt_f64(e.train_loss),
                crate::osm::fmt_f64(e.val_loss),
            ]
        }),
    )
}
