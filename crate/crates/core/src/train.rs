//! A small next-item model trained under any of the losses.
//!
//! The encoder is a single affine map over the current item's embedding,
//! `x = A y_item + b`, with the item table `Y` shared between input and
//! output. Its gradients are
//!
//! ```text
//! dL/dA      = sum_t g_t y_{item_t}^T
//! dL/db      = sum_t g_t
//! dL/dy_item += A^T g_t          (input side)
//! dL/dy_j    += dL/dy_j (loss)   (output side)
//! ```
//!
//! where `g_t = dL/dx_t` comes from the loss.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis, Dimension, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{make_batches, EvalCase, SequenceBatch, SplitBundle};
use crate::error::{Error, Result};
use crate::eval::{self, MetricReport, Scorer};
use crate::loss::{self, LossKind, LossResult, Negatives};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    /// Item table `Y`, `C × d`.
    pub emb: Array2<f64>,
    /// Projection `A`, `d × d`.
    pub proj: Array2<f64>,
    pub bias: Array1<f64>,
}

impl EncoderParams {
    /// All entries drawn from `N(0, INIT_STD^2)`.
    pub fn init(n_items: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).unwrap();
        let mut draw = || normal.sample(&mut rng);
        Self {
            emb: Array2::from_shape_simple_fn((n_items, dim), &mut draw),
            proj: Array2::from_shape_simple_fn((dim, dim), &mut draw),
            bias: Array1::from_shape_simple_fn(dim, &mut draw),
        }
    }

    pub fn n_items(&self) -> usize {
        self.emb.nrows()
    }

    pub fn dim(&self) -> usize {
        self.emb.ncols()
    }

    /// Encoder output for a single current item (`None` gives the bias).
    pub fn encode_item(&self, item: Option<u32>) -> Array1<f64> {
        match item {
            Some(i) => self.proj.dot(&self.emb.row(i as usize)) + &self.bias,
            None => self.bias.clone(),
        }
    }

    fn all_finite(&self) -> bool {
        self.emb.iter().chain(self.proj.iter()).chain(self.bias.iter()).all(|v| v.is_finite())
    }
}

impl Scorer for EncoderParams {
    fn n_items(&self) -> usize {
        self.emb.nrows()
    }

    fn score(&self, case: &EvalCase) -> Vec<f64> {
        let x = self.encode_item(case.prefix.last().copied());
        self.emb.dot(&x).to_vec()
    }
}

/// Encoder outputs for a batch, flattened row-major to `(s * l) × d`.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub x: Array2<f64>,
    /// Zero-based current item per position, `None` for padding.
    pub items: Vec<Option<usize>>,
    /// `false` at padding positions.
    pub valid: Vec<bool>,
}

pub fn encode(batch: &SequenceBatch, params: &EncoderParams) -> Encoded {
    let items: Vec<Option<usize>> = batch
        .items
        .iter()
        .map(|&i| if i == 0 { None } else { Some(i as usize - 1) })
        .collect();
    encode_items(&items, params)
}

fn encode_items(items: &[Option<usize>], params: &EncoderParams) -> Encoded {
    let rows: Vec<usize> = items.iter().map(|i| i.unwrap_or(0)).collect();
    let gathered = params.emb.select(Axis(0), &rows);
    let mut x = gathered.dot(&params.proj.t()) + &params.bias;
    for (k, item) in items.iter().enumerate() {
        if item.is_none() {
            x.row_mut(k).assign(&params.bias);
        }
    }
    Encoded {
        x,
        valid: items.iter().map(Option::is_some).collect(),
        items: items.to_vec(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrads {
    pub emb: Array2<f64>,
    pub proj: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Chains `dL/dX` and the loss's `dL/dY` through the encoder.
pub fn backward(encoded: &Encoded, loss: &LossResult, params: &EncoderParams) -> EncoderGrads {
    let g = &loss.grad_x;
    let mut emb = Array2::zeros(params.emb.raw_dim());
    loss.grad_y.add_to(emb.view_mut(), 1.0);

    let valid_rows: Vec<usize> = (0..encoded.items.len()).filter(|&k| encoded.valid[k]).collect();
    let item_rows: Vec<usize> = valid_rows.iter().map(|&k| encoded.items[k].unwrap()).collect();
    let gv = g.select(Axis(0), &valid_rows);
    let yv = params.emb.select(Axis(0), &item_rows);

    let proj = gv.t().dot(&yv);
    let input_side = gv.dot(&params.proj);
    for (r, &item) in item_rows.iter().enumerate() {
        emb.row_mut(item).scaled_add(1.0, &input_side.row(r));
    }
    // padding rows equal the bias, so their gradient reaches it too
    let bias = g.sum_axis(Axis(0));
    EncoderGrads { emb, proj, bias }
}

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: Vec::new(),
        }
    }

    fn update<D: Dimension>(&mut self, slot: usize, param: &mut ndarray::Array<f64, D>, grad: &ndarray::Array<f64, D>) {
        if self.moments.len() <= slot {
            self.moments.resize(slot + 1, (Vec::new(), Vec::new()));
        }
        let (m, v) = &mut self.moments[slot];
        if m.is_empty() {
            *m = vec![0.0; param.len()];
            *v = vec![0.0; param.len()];
        }
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let (lr, eps) = (self.lr, self.eps);
        let mut k = 0;
        Zip::from(param).and(grad).for_each(|p, &g| {
            m[k] = b1 * m[k] + (1.0 - b1) * g;
            v[k] = b2 * v[k] + (1.0 - b2) * g * g;
            *p -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
            k += 1;
        });
    }

    pub fn step(&mut self, params: &mut EncoderParams, grads: &EncoderGrads) {
        self.step += 1;
        self.update(0, &mut params.emb, &grads.emb);
        self.update(1, &mut params.proj, &grads.proj);
        self.update(2, &mut params.bias, &grads.bias);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub dim: usize,
    pub batch_size: usize,
    pub max_len: usize,
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Drop prefix items from the candidates during validation.
    pub exclude_seen: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::Ce,
            dim: 64,
            batch_size: 128,
            max_len: 50,
            lr: 1e-3,
            max_epochs: 50,
            patience: 5,
            seed: 0,
            exclude_seen: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.batch_size == 0 || self.max_len == 0 || self.max_epochs == 0 {
            return Err(Error::invalid("config", "dim, batch size, max length and epochs must be positive"));
        }
        if self.patience == 0 {
            return Err(Error::invalid("patience", "must be at least 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("lr", "must be finite and non-negative"));
        }
        match self.loss {
            LossKind::BcePlus { negatives } | LossKind::CeSampled { negatives } if negatives == 0 => {
                Err(Error::invalid("negatives", "must be at least 1"))
            }
            LossKind::Rece(p) => p.validate(),
            _ => Ok(()),
        }
    }

    /// `key=value` lines describing the run.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "loss={}", self.loss.name());
        match self.loss {
            LossKind::BcePlus { negatives } | LossKind::CeSampled { negatives } => {
                let _ = writeln!(s, "negatives={negatives}");
            }
            LossKind::Rece(p) => {
                let _ = writeln!(s, "n_b={}\nn_c={}\nn_ec={}\nrounds={}", p.n_b, p.n_c, p.n_ec, p.rounds);
            }
            LossKind::Ce => {}
        }
        let _ = writeln!(
            s,
            "dim={}\nbatch_size={}\nmax_len={}\nlr={}\nmax_epochs={}\npatience={}\nseed={}\nexclude_seen={}",
            self.dim, self.batch_size, self.max_len, self.lr, self.max_epochs, self.patience, self.seed, self.exclude_seen
        );
        s
    }
}

fn mix_seed(seed: u64, step: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = seed ^ step.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Evaluates `kind` on encoder outputs. `step_seed` drives the sampler and
/// the bucket vectors. The reduced loss uses at most one chunk per valid row.
pub fn compute_loss(
    kind: &LossKind,
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    targets: &[usize],
    valid_mask: &[bool],
    step_seed: u64,
) -> Result<LossResult> {
    match kind {
        LossKind::Ce => loss::ce_full(x, y, targets, valid_mask),
        LossKind::BcePlus { negatives } | LossKind::CeSampled { negatives } => {
            let mut rng = ChaCha8Rng::seed_from_u64(step_seed);
            let neg = Negatives::sample(targets, valid_mask, y.nrows(), *negatives, &mut rng)?;
            if matches!(kind, LossKind::BcePlus { .. }) {
                loss::bce_plus(x, y, targets, &neg, valid_mask)
            } else {
                loss::ce_sampled(x, y, targets, &neg, valid_mask)
            }
        }
        LossKind::Rece(p) => {
            // a short final batch may hold fewer valid rows than chunks
            let n_valid = valid_mask.iter().filter(|&&v| v).count().max(1);
            let params = loss::ReceParams { seed: step_seed, n_c: p.n_c.min(n_valid), ..*p };
            loss::rece(x, y, targets, &params, valid_mask)
        }
    }
}

/// Loss and parameter gradients for one batch.
pub fn batch_gradients(
    kind: &LossKind,
    batch: &SequenceBatch,
    params: &EncoderParams,
    step_seed: u64,
) -> Result<(LossResult, EncoderGrads)> {
    let encoded = encode(batch, params);
    let targets = batch.flat_targets();
    let mask = batch.flat_mask();
    let result = compute_loss(kind, encoded.x.view(), params.emb.view(), &targets, &mask, step_seed)?;
    let grads = backward(&encoded, &result, params);
    Ok((result, grads))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss per valid position.
    pub train_loss: f64,
    pub val_ndcg10: f64,
    /// Largest logit count computed in a single step.
    pub peak_step_logits: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    /// Parameters from the epoch with the best validation NDCG@10.
    pub params: EncoderParams,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl TrainOutput {
    pub fn best_val_ndcg10(&self) -> f64 {
        self.history[self.best_epoch].val_ndcg10
    }

    pub fn peak_step_logits(&self) -> usize {
        self.history.iter().map(|h| h.peak_step_logits).max().unwrap_or(0)
    }
}

pub fn validation_ndcg10(params: &EncoderParams, cases: &[EvalCase], exclude_seen: bool) -> f64 {
    eval::evaluate(params, cases, &[10], exclude_seen).ndcg_at(10)
}

/// Trains with early stopping on validation NDCG@10 and returns the best
/// checkpoint. `on_epoch` sees each record as it is produced.
pub fn train_with(
    split: &SplitBundle,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutput> {
    config.validate()?;
    let mut params = EncoderParams::init(split.n_items(), config.dim, config.seed);
    let mut adam = Adam::new(config.lr);
    let mut best = (f64::NEG_INFINITY, params.clone(), 0);
    let mut history = Vec::new();
    let mut since_best = 0;
    let mut step = 0u64;

    for epoch in 0..config.max_epochs {
        let mut loss_sum = 0.0;
        let mut positions = 0usize;
        let mut peak = 0;
        for batch in make_batches(&split.train, config.batch_size, config.max_len, config.seed, epoch as u64)? {
            let n_valid = batch.n_valid();
            if n_valid == 0 {
                continue;
            }
            let (result, grads) = batch_gradients(&config.loss, &batch, &params, mix_seed(config.seed, step))?;
            if !result.loss.is_finite() {
                return Err(Error::Diverged { epoch, step: step as usize, loss: result.loss });
            }
            loss_sum += result.loss * n_valid as f64;
            positions += n_valid;
            peak = peak.max(result.computed_logits);
            adam.step(&mut params, &grads);
            step += 1;
        }
        if !params.all_finite() {
            return Err(Error::Diverged { epoch, step: step as usize, loss: f64::NAN });
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / positions.max(1) as f64,
            val_ndcg10: validation_ndcg10(&params, &split.validation, config.exclude_seen),
            peak_step_logits: peak,
        };
        on_epoch(&record);
        if record.val_ndcg10 > best.0 {
            best = (record.val_ndcg10, params.clone(), epoch);
            since_best = 0;
        } else {
            since_best += 1;
        }
        history.push(record);
        if since_best >= config.patience {
            break;
        }
    }
    Ok(TrainOutput {
        params: best.1,
        history,
        best_epoch: best.2,
    })
}

pub fn train(split: &SplitBundle, config: &TrainConfig) -> Result<TrainOutput> {
    train_with(split, config, |_| {})
}

/// Test-set metrics of a trained model.
pub fn test_metrics(params: &EncoderParams, split: &SplitBundle, ks: &[usize], exclude_seen: bool) -> MetricReport {
    eval::evaluate(params, &split.test, ks, exclude_seen)
}

const MAGIC: &[u8; 8] = b"RECECKPT";
const VERSION: u32 = 1;

/// Writes a checkpoint:
///
/// ```text
/// "RECECKPT"  u32 version  u64 n_items  u64 dim
/// u64 config_len  config (UTF-8 key=value lines)
/// f64 emb[n_items * dim]  f64 proj[dim * dim]  f64 bias[dim]
/// ```
///
/// All integers and floats little-endian, matrices row-major.
pub fn save_checkpoint(path: &Path, params: &EncoderParams, config: &str) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(params.n_items() as u64).to_le_bytes())?;
    w.write_all(&(params.dim() as u64).to_le_bytes())?;
    w.write_all(&(config.len() as u64).to_le_bytes())?;
    w.write_all(config.as_bytes())?;
    for v in params.emb.iter().chain(params.proj.iter()).chain(params.bias.iter()) {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(EncoderParams, String)> {
    let bad = |reason: &str| Error::Checkpoint { path: path.to_owned(), reason: reason.to_owned() };
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf).map_err(|_| bad("truncated header"))?;
    let version = u32::from_le_bytes(u32buf);
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let read_u64 = |r: &mut BufReader<File>| -> Result<u64> {
        let mut b = [0u8; 8];
        r.read_exact(&mut b).map_err(|_| bad("truncated header"))?;
        Ok(u64::from_le_bytes(b))
    };
    let n_items = read_u64(&mut r)? as usize;
    let dim = read_u64(&mut r)? as usize;
    let config_len = read_u64(&mut r)? as usize;
    let mut config = vec![0u8; config_len];
    r.read_exact(&mut config).map_err(|_| bad("truncated config"))?;
    let config = String::from_utf8(config).map_err(|_| bad("config is not UTF-8"))?;

    let total = n_items * dim + dim * dim + dim;
    let mut raw = vec![0u8; total * 8];
    r.read_exact(&mut raw).map_err(|_| bad("truncated parameters"))?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(bad("trailing bytes"));
    }
    let values: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let (emb, tail) = values.split_at(n_items * dim);
    let (proj, bias) = tail.split_at(dim * dim);
    Ok((
        EncoderParams {
            emb: Array2::from_shape_vec((n_items, dim), emb.to_vec()).map_err(|_| bad("bad shape"))?,
            proj: Array2::from_shape_vec((dim, dim), proj.to_vec()).map_err(|_| bad("bad shape"))?,
            bias: Array1::from_vec(bias.to_vec()),
        },
        config,
    ))
}
