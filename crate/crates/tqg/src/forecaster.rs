//! Reduced spatio-temporal forecaster: gated causal temporal convolutions
//! (kernel 2, dilation doubling per layer) interleaved with one graph
//! convolution per layer over the quotient adjacency plus an optional
//! learnable row-softmax adjacency. Frozen encoder embeddings enter through
//! spatially gated addition after the final spatial layer; a linear head maps
//! the last hidden state to all horizon steps at once. Trained with masked
//! MAE on de-normalized speeds.

use rand::seq::SliceRandom;

use crate::encoder::EpochLoss;
use crate::nn::{derive_rng, glorot_uniform, normalize_adjacency, ParamStore, Tape, Tensor2, Var};
use crate::quotient::QuotientGraph;
use crate::sensors::SpeedSeries;
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct ForecastConfig {
    /// input steps S
    pub s_in: usize,
    /// horizon steps T
    pub horizon: usize,
    /// hidden channels
    pub d_h: usize,
    /// spatio-temporal layers; layer l uses dilation 2^l
    pub n_st_layers: usize,
    pub use_sga: bool,
    pub use_adaptive_adj: bool,
    pub adaptive_rank: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// windows per optimizer step
    pub batch_size: usize,
}

impl Default for ForecastConfig {
    fn default() -> Self {
        ForecastConfig {
            s_in: 12,
            horizon: 12,
            d_h: 16,
            n_st_layers: 2,
            use_sga: false,
            use_adaptive_adj: true,
            adaptive_rank: 8,
            learning_rate: 3e-4,
            epochs: 100,
            batch_size: 8,
        }
    }
}

/// One training window: raw (possibly NaN) S×N inputs, N×T targets with the
/// NaN cells zeroed and masked out.
#[derive(Clone, Debug)]
pub struct Window {
    pub input: Tensor2,
    pub target: Tensor2,
    pub mask: Vec<bool>,
}

/// Sliding windows with stride 1, entirely inside one split.
pub fn make_windows(series: &SpeedSeries, s_in: usize, horizon: usize) -> Result<Vec<Window>> {
    let total = series.len();
    let n = series.n_sensors;
    if total < s_in + horizon {
        return Err(Error::TooShort(format!(
            "split has {total} steps, need at least {}",
            s_in + horizon
        )));
    }
    let mut windows = Vec::with_capacity(total - s_in - horizon + 1);
    for t0 in 0..=(total - s_in - horizon) {
        let mut input = Tensor2::zeros(s_in, n);
        for s in 0..s_in {
            for i in 0..n {
                input[(s, i)] = series.value(t0 + s, i);
            }
        }
        let mut target = Tensor2::zeros(n, horizon);
        let mut mask = vec![false; n * horizon];
        for k in 0..horizon {
            for i in 0..n {
                let v = series.value(t0 + s_in + k, i);
                if v.is_nan() {
                    target[(i, k)] = 0.0;
                } else {
                    target[(i, k)] = v;
                    mask[i * horizon + k] = true;
                }
            }
        }
        windows.push(Window { input, target, mask });
    }
    Ok(windows)
}

/// Row-softmax self-adaptive adjacency: `softmax_row(relu(E1 · E2ᵀ))`.
pub fn adaptive_adjacency(e1: &Tensor2, e2: &Tensor2) -> Tensor2 {
    let mut tape = Tape::new();
    let a = tape.input(e1.clone());
    let b = tape.input(e2.clone());
    let prod = tape.matmul_nt(a, b);
    let r = tape.relu(prod);
    let sm = tape.row_softmax(r);
    tape.value(sm).clone()
}

/// Spatially gated addition: `h + sigmoid(e·W_g + b_g) ⊙ (e·W_p)`.
pub fn sga_combine(
    h: &Tensor2,
    e: &Tensor2,
    w_p: &Tensor2,
    w_g: &Tensor2,
    b_g: &Tensor2,
) -> Result<Tensor2> {
    if h.rows() != e.rows() || e.cols() != w_p.rows() || w_p.cols() != h.cols() {
        return Err(Error::ShapeMismatch(format!(
            "sga: h {:?}, e {:?}, w_p {:?}",
            h.shape(),
            e.shape(),
            w_p.shape()
        )));
    }
    let mut tape = Tape::new();
    let hv = tape.input(h.clone());
    let ev = tape.input(e.clone());
    let wp = tape.input(w_p.clone());
    let wg = tape.input(w_g.clone());
    let bg = tape.input(b_g.clone());
    let out = sga_on(&mut tape, hv, ev, wp, wg, bg);
    Ok(tape.value(out).clone())
}

fn sga_on(tape: &mut Tape, h: Var, e: Var, w_p: Var, w_g: Var, b_g: Var) -> Var {
    let p = tape.matmul(e, w_p);
    let g_lin = tape.matmul(e, w_g);
    let g_lin = tape.add_bias(g_lin, b_g);
    let g = tape.sigmoid(g_lin);
    let gated = tape.mul(g, p);
    tape.add(h, gated)
}

/// Masked MAE as a standalone operation: scalar loss plus the gradient with
/// respect to each prediction tensor.
pub fn mae_loss(
    preds: &[Tensor2],
    targets: &[Tensor2],
    masks: &[Vec<bool>],
) -> Result<(f64, Vec<Tensor2>)> {
    if preds.len() != targets.len() || preds.len() != masks.len() {
        return Err(Error::ShapeMismatch("mae_loss batch lengths differ".into()));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = preds.iter().map(|p| tape.input(p.clone())).collect();
    let all = tape.concat_rows(&vars);
    let mut target = Vec::new();
    let mut mask = Vec::new();
    let cols = targets.first().map(|t| t.cols()).unwrap_or(0);
    for (t, m) in targets.iter().zip(masks) {
        if t.cols() != cols {
            return Err(Error::ShapeMismatch("mae_loss column mismatch".into()));
        }
        target.extend_from_slice(t.data());
        mask.extend_from_slice(m);
    }
    let rows = target.len() / cols.max(1);
    let loss = tape.masked_mae(all, Tensor2::from_vec(rows, cols, target), mask)?;
    let value = tape.value(loss).item();
    let grads = tape.backward(loss);
    Ok((value, vars.iter().map(|&v| grads.wrt(&tape, v)).collect()))
}

/// Per-dataset z-score fitted on the train split (NaNs excluded).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalization {
    pub mean: f64,
    pub std: f64,
}

impl Normalization {
    pub fn identity() -> Self {
        Normalization { mean: 0.0, std: 1.0 }
    }

    pub fn fit(series: &SpeedSeries) -> Self {
        let mut sum = 0.0;
        let mut count = 0usize;
        for &v in series.values() {
            if !v.is_nan() {
                sum += v;
                count += 1;
            }
        }
        let mean = if count == 0 { 0.0 } else { sum / count as f64 };
        let mut ss = 0.0;
        for &v in series.values() {
            if !v.is_nan() {
                ss += (v - mean).powi(2);
            }
        }
        let std = if count == 0 {
            1.0
        } else {
            (ss / count as f64).sqrt().max(1e-9)
        };
        Normalization { mean, std }
    }
}

pub struct Forecaster {
    pub cfg: ForecastConfig,
    pub params: ParamStore,
    pub n_sensors: usize,
    pub d_emb: Option<usize>,
    pub norm: Normalization,
}

struct BoundLayer {
    wf_prev: Var,
    wf_cur: Var,
    bf: Var,
    wg_prev: Var,
    wg_cur: Var,
    bg: Var,
    wq: Var,
    bq: Var,
    wa: Option<Var>,
}

struct BoundForecaster {
    w_in: Var,
    b_in: Var,
    layers: Vec<BoundLayer>,
    adapt: Option<(Var, Var)>,
    sga: Option<(Var, Var, Var)>,
    w_head: Var,
    b_head: Var,
}

impl Forecaster {
    fn has_sga(&self) -> bool {
        self.cfg.use_sga && self.d_emb.is_some()
    }

    /// Seeded init. Shared parameters draw from one stream and SGA parameters
    /// from a separate one, so the `use_sga=false` model is bit-identical to
    /// the no-encoder baseline under the same seed.
    pub fn init(
        cfg: ForecastConfig,
        n_sensors: usize,
        d_emb: Option<usize>,
        seed: u64,
    ) -> Self {
        let mut rng = derive_rng(seed, &[0xF0C, 1]);
        let mut params = ParamStore::new();
        let d = cfg.d_h;
        params.insert("fc.in.w", glorot_uniform(1, d, &mut rng));
        params.insert("fc.in.b", Tensor2::zeros(1, d));
        for l in 0..cfg.n_st_layers {
            for (tag, _) in [("f", 0), ("g", 1)] {
                params.insert(&format!("fc.tcn{l}.w{tag}_prev"), glorot_uniform(d, d, &mut rng));
                params.insert(&format!("fc.tcn{l}.w{tag}_cur"), glorot_uniform(d, d, &mut rng));
                params.insert(&format!("fc.tcn{l}.b{tag}"), Tensor2::zeros(1, d));
            }
            params.insert(&format!("fc.gcn{l}.wq"), glorot_uniform(d, d, &mut rng));
            params.insert(&format!("fc.gcn{l}.bq"), Tensor2::zeros(1, d));
            if cfg.use_adaptive_adj {
                params.insert(&format!("fc.gcn{l}.wa"), glorot_uniform(d, d, &mut rng));
            }
        }
        if cfg.use_adaptive_adj {
            params.insert("fc.adapt.e1", glorot_uniform(n_sensors, cfg.adaptive_rank, &mut rng));
            params.insert("fc.adapt.e2", glorot_uniform(n_sensors, cfg.adaptive_rank, &mut rng));
        }
        // SGA weights come from their own stream so the shared parameters
        // above are identical with and without the encoder arm
        if cfg.use_sga {
            if let Some(de) = d_emb {
                let mut rng_sga = derive_rng(seed, &[0xF0C, 2]);
                params.insert("fc.sga.wp", glorot_uniform(de, d, &mut rng_sga));
                params.insert("fc.sga.wg", glorot_uniform(de, d, &mut rng_sga));
                params.insert("fc.sga.bg", Tensor2::zeros(1, d));
            }
        }
        params.insert("fc.head.w", glorot_uniform(d, cfg.horizon, &mut rng));
        params.insert("fc.head.b", Tensor2::zeros(1, cfg.horizon));

        Forecaster {
            cfg,
            params,
            n_sensors,
            d_emb,
            norm: Normalization::identity(),
        }
    }

    fn bind(&self, tape: &mut Tape) -> BoundForecaster {
        let p = &self.params;
        BoundForecaster {
            w_in: tape.input(p.get("fc.in.w").clone()),
            b_in: tape.input(p.get("fc.in.b").clone()),
            layers: (0..self.cfg.n_st_layers)
                .map(|l| BoundLayer {
                    wf_prev: tape.input(p.get(&format!("fc.tcn{l}.wf_prev")).clone()),
                    wf_cur: tape.input(p.get(&format!("fc.tcn{l}.wf_cur")).clone()),
                    bf: tape.input(p.get(&format!("fc.tcn{l}.bf")).clone()),
                    wg_prev: tape.input(p.get(&format!("fc.tcn{l}.wg_prev")).clone()),
                    wg_cur: tape.input(p.get(&format!("fc.tcn{l}.wg_cur")).clone()),
                    bg: tape.input(p.get(&format!("fc.tcn{l}.bg")).clone()),
                    wq: tape.input(p.get(&format!("fc.gcn{l}.wq")).clone()),
                    bq: tape.input(p.get(&format!("fc.gcn{l}.bq")).clone()),
                    wa: self
                        .cfg
                        .use_adaptive_adj
                        .then(|| tape.input(p.get(&format!("fc.gcn{l}.wa")).clone())),
                })
                .collect(),
            adapt: self.cfg.use_adaptive_adj.then(|| {
                (
                    tape.input(p.get("fc.adapt.e1").clone()),
                    tape.input(p.get("fc.adapt.e2").clone()),
                )
            }),
            sga: self.has_sga().then(|| {
                (
                    tape.input(p.get("fc.sga.wp").clone()),
                    tape.input(p.get("fc.sga.wg").clone()),
                    tape.input(p.get("fc.sga.bg").clone()),
                )
            }),
            w_head: tape.input(p.get("fc.head.w").clone()),
            b_head: tape.input(p.get("fc.head.b").clone()),
        }
    }

    fn bound_vars(bound: &BoundForecaster) -> Vec<Var> {
        let mut vars = vec![bound.w_in, bound.b_in];
        for l in &bound.layers {
            vars.extend([l.wf_prev, l.wf_cur, l.bf, l.wg_prev, l.wg_cur, l.bg, l.wq, l.bq]);
            if let Some(wa) = l.wa {
                vars.push(wa);
            }
        }
        if let Some((e1, e2)) = bound.adapt {
            vars.extend([e1, e2]);
        }
        if let Some((wp, wg, bg)) = bound.sga {
            vars.extend([wp, wg, bg]);
        }
        vars.extend([bound.w_head, bound.b_head]);
        vars
    }

    /// Forward one window on the tape; returns the N×T de-normalized
    /// prediction variable.
    fn forward_window_on(
        &self,
        tape: &mut Tape,
        bound: &BoundForecaster,
        adapt_var: Option<Var>,
        s_norm: Var,
        window: &Window,
        emb: Option<Var>,
    ) -> Var {
        let n = self.n_sensors;
        let s_in = self.cfg.s_in;
        // z-score, NaN → 0 (mean impute in z-space)
        let mut steps: Vec<Var> = (0..s_in)
            .map(|t| {
                let mut col = Tensor2::zeros(n, 1);
                for i in 0..n {
                    let v = window.input[(t, i)];
                    col[(i, 0)] = if v.is_nan() {
                        0.0
                    } else {
                        (v - self.norm.mean) / self.norm.std
                    };
                }
                let x = tape.input(col);
                let h = tape.matmul(x, bound.w_in);
                tape.add_bias(h, bound.b_in)
            })
            .collect();

        let zeros = tape.input(Tensor2::zeros(n, self.cfg.d_h));
        for (l, layer) in bound.layers.iter().enumerate() {
            let dilation = 1usize << l;
            let mut next = Vec::with_capacity(s_in);
            for t in 0..s_in {
                let prev = if t >= dilation { steps[t - dilation] } else { zeros };
                let cur = steps[t];
                // gated causal temporal convolution, kernel 2
                let f1 = tape.matmul(prev, layer.wf_prev);
                let f2 = tape.matmul(cur, layer.wf_cur);
                let f = tape.add(f1, f2);
                let f = tape.add_bias(f, layer.bf);
                let f = tape.tanh(f);
                let g1 = tape.matmul(prev, layer.wg_prev);
                let g2 = tape.matmul(cur, layer.wg_cur);
                let g = tape.add(g1, g2);
                let g = tape.add_bias(g, layer.bg);
                let g = tape.sigmoid(g);
                let u = tape.mul(f, g);
                // spatial propagation: fixed quotient support plus the
                // learnable adaptive support
                let su = tape.matmul(s_norm, u);
                let mut v = tape.matmul(su, layer.wq);
                if let (Some(a), Some(wa)) = (adapt_var, layer.wa) {
                    let au = tape.matmul(a, u);
                    let av = tape.matmul(au, wa);
                    v = tape.add(v, av);
                }
                let v = tape.add_bias(v, layer.bq);
                next.push(tape.relu(v));
            }
            steps = next;
        }

        let mut h_last = steps[s_in - 1];
        if let (Some((wp, wg, bg)), Some(e)) = (bound.sga, emb) {
            h_last = sga_on(tape, h_last, e, wp, wg, bg);
        }
        let pred_z = tape.matmul(h_last, bound.w_head);
        let pred_z = tape.add_bias(pred_z, bound.b_head);
        tape.affine_scalar(pred_z, self.norm.std, self.norm.mean)
    }

    fn adapt_on(&self, tape: &mut Tape, bound: &BoundForecaster) -> Option<Var> {
        bound.adapt.map(|(e1, e2)| {
            let prod = tape.matmul_nt(e1, e2);
            let r = tape.relu(prod);
            tape.row_softmax(r)
        })
    }

    fn validate(&self, q: &QuotientGraph, emb: Option<&Tensor2>) -> Result<()> {
        if q.n() != self.n_sensors {
            return Err(Error::ShapeMismatch(format!(
                "quotient has {} nodes, model expects {}",
                q.n(),
                self.n_sensors
            )));
        }
        if let (true, Some(e)) = (self.has_sga(), emb) {
            if e.rows() != self.n_sensors || Some(e.cols()) != self.d_emb {
                return Err(Error::ShapeMismatch(format!(
                    "embeddings {:?} for {} sensors × {:?}",
                    e.shape(),
                    self.n_sensors,
                    self.d_emb
                )));
            }
        }
        if self.has_sga() && emb.is_none() {
            return Err(Error::ShapeMismatch(
                "use_sga is on but no embeddings were given".into(),
            ));
        }
        Ok(())
    }
}

/// Forward a batch of windows through the model; one T×N prediction per
/// window, in km/h (de-normalized).
pub fn forecast_forward(
    model: &Forecaster,
    windows: &[Window],
    q: &QuotientGraph,
    emb: Option<&Tensor2>,
) -> Result<Vec<Tensor2>> {
    model.validate(q, emb)?;
    let s_norm_t = normalize_adjacency(q.adjacency(), q.n());
    let mut out = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(model.cfg.batch_size.max(1)) {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let adapt = model.adapt_on(&mut tape, &bound);
        let s_norm = tape.input(s_norm_t.clone());
        let emb_var = emb.filter(|_| model.has_sga()).map(|e| tape.input(e.clone()));
        for w in chunk {
            let pred = model.forward_window_on(&mut tape, &bound, adapt, s_norm, w, emb_var);
            out.push(tape.value(pred).transpose());
        }
    }
    Ok(out)
}

/// Adam training over sliding train windows with best-on-validation weights
/// retained. Deterministic per seed.
pub fn train_forecaster(
    train: &SpeedSeries,
    val: &SpeedSeries,
    q: &QuotientGraph,
    emb: Option<&Tensor2>,
    cfg: ForecastConfig,
    seed: u64,
) -> Result<(Forecaster, Vec<EpochLoss>)> {
    let d_emb = emb.map(|e| e.cols());
    let mut model = Forecaster::init(cfg, q.n(), d_emb, seed);
    model.norm = Normalization::fit(train);
    model.validate(q, emb)?;

    let train_windows = make_windows(train, model.cfg.s_in, model.cfg.horizon)?;
    let val_windows = make_windows(val, model.cfg.s_in, model.cfg.horizon)?;
    let names: Vec<String> = model.params.names().map(String::from).collect();

    let mut best_val = f64::INFINITY;
    let mut best_snapshot = model.params.snapshot();
    let mut history = Vec::new();

    for epoch in 0..model.cfg.epochs {
        let mut order: Vec<usize> = (0..train_windows.len()).collect();
        order.shuffle(&mut derive_rng(seed, &[5, epoch as u64]));

        let mut abs_sum = 0.0;
        let mut cell_count = 0usize;
        for chunk in order.chunks(model.cfg.batch_size.max(1)) {
            let windows: Vec<Window> = chunk.iter().map(|&i| train_windows[i].clone()).collect();
            let batch_valid: usize = windows
                .iter()
                .map(|w| w.mask.iter().filter(|&&m| m).count())
                .sum();
            if batch_valid == 0 {
                continue;
            }
            let (loss_value, grads) = training_loss(&model, &windows, q, emb, true)?;
            let grads = grads.expect("gradients requested");
            model.params.zero_grads();
            debug_assert_eq!(grads.len(), names.len(), "grads must mirror param order");
            for (name, g) in &grads {
                model.params.accumulate_grad(name, g);
            }
            model.params.adam_step(model.cfg.learning_rate);
            abs_sum += loss_value * batch_valid as f64;
            cell_count += batch_valid;
        }
        let train_loss = if cell_count == 0 { f64::NAN } else { abs_sum / cell_count as f64 };

        let val_loss = mae_over_windows(&model, &val_windows, q, emb)?;
        if val_loss < best_val {
            best_val = val_loss;
            best_snapshot = model.params.snapshot();
        }
        history.push(EpochLoss {
            epoch,
            train_loss,
            val_loss,
        });
    }

    model.params.restore(&best_snapshot);
    Ok((model, history))
}

/// Pooled masked-MAE training loss over a batch of windows (the optimizer
/// step primitive): the scalar and, when requested, the gradient for every
/// model parameter by name.
pub fn training_loss(
    model: &Forecaster,
    windows: &[Window],
    q: &QuotientGraph,
    emb: Option<&Tensor2>,
    with_grads: bool,
) -> Result<(f64, Option<Vec<(String, Tensor2)>>)> {
    model.validate(q, emb)?;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let adapt = model.adapt_on(&mut tape, &bound);
    let s_norm = tape.input(normalize_adjacency(q.adjacency(), q.n()));
    let emb_var = emb.filter(|_| model.has_sga()).map(|e| tape.input(e.clone()));

    let mut preds = Vec::with_capacity(windows.len());
    let mut target = Vec::new();
    let mut mask = Vec::new();
    for w in windows {
        preds.push(model.forward_window_on(&mut tape, &bound, adapt, s_norm, w, emb_var));
        target.extend_from_slice(w.target.data());
        mask.extend_from_slice(&w.mask);
    }
    let all = tape.concat_rows(&preds);
    let rows = windows.len() * model.n_sensors;
    let loss = tape.masked_mae(all, Tensor2::from_vec(rows, model.cfg.horizon, target), mask)?;
    let loss_value = tape.value(loss).item();
    if !with_grads {
        return Ok((loss_value, None));
    }
    let grads = tape.backward(loss);
    let vars = Forecaster::bound_vars(&bound);
    let named = model
        .params
        .names()
        .zip(&vars)
        .map(|(name, &v)| (name.to_string(), grads.wrt(&tape, v)))
        .collect();
    Ok((loss_value, Some(named)))
}

fn mae_over_windows(
    model: &Forecaster,
    windows: &[Window],
    q: &QuotientGraph,
    emb: Option<&Tensor2>,
) -> Result<f64> {
    let preds = forecast_forward(model, windows, q, emb)?;
    let (_, all) = mae_per_horizon(&preds, windows)?;
    Ok(all)
}

/// Per-horizon and pooled MAE of T×N predictions against window targets.
pub fn mae_per_horizon(preds: &[Tensor2], windows: &[Window]) -> Result<(Vec<f64>, f64)> {
    if preds.len() != windows.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions for {} windows",
            preds.len(),
            windows.len()
        )));
    }
    let horizon = preds.first().map(|p| p.rows()).unwrap_or(0);
    let mut abs = vec![0.0; horizon];
    let mut count = vec![0usize; horizon];
    for (pred, w) in preds.iter().zip(windows) {
        let n = pred.cols();
        for k in 0..horizon {
            for i in 0..n {
                if w.mask[i * horizon + k] {
                    abs[k] += (pred[(k, i)] - w.target[(i, k)]).abs();
                    count[k] += 1;
                }
            }
        }
    }
    if count.iter().sum::<usize>() == 0 {
        return Err(Error::EmptyMask);
    }
    let per_step: Vec<f64> = abs
        .iter()
        .zip(&count)
        .map(|(&a, &c)| if c == 0 { f64::NAN } else { a / c as f64 })
        .collect();
    let all = abs.iter().sum::<f64>() / count.iter().sum::<usize>() as f64;
    Ok((per_step, all))
}

/// Horizon-resolved test metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// MAE at horizon step k (1-based step k is `per_step[k-1]`)
    pub per_step: Vec<f64>,
    pub all_steps: f64,
}

pub fn evaluate(
    model: &Forecaster,
    test: &SpeedSeries,
    q: &QuotientGraph,
    emb: Option<&Tensor2>,
) -> Result<EvalReport> {
    let windows = make_windows(test, model.cfg.s_in, model.cfg.horizon)?;
    let preds = forecast_forward(model, &windows, q, emb)?;
    let (per_step, all_steps) = mae_per_horizon(&preds, &windows)?;
    Ok(EvalReport { per_step, all_steps })
}
