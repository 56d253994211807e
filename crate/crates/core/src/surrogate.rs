//! MLP approximation of the reachability margin.
//!
//! The network maps `x_r = [e_z, f_1, ..., f_Nc]` (all in the base frame) to a
//! scalar margin. Inputs are z-scored and the output de-normalized inside the
//! model, so callers always pass raw vectors and get meters back.

use std::path::Path;

use nalgebra::{DMatrix, DVector, Vector3, Vector6};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinemodel::{base_rotation, base_rotation_derivatives, Configuration, KinematicModel, KinematicsError};
use crate::reachability::{margin_oracle, ReachabilityError, RegionParams, RegionQuery};

pub const MODEL_MAGIC: &[u8; 5] = b"RAKM1";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SurrogateError {
    #[error("input has {got} entries, model expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("{rejected} of {attempts} draws were infeasible; sampling ranges are too wide for this robot")]
    RejectionRate { rejected: usize, attempts: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("malformed model file: {0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error(transparent)]
    Reachability(#[from] ReachabilityError),
}

/// Uniform sampling bounds around the nominal stance. All ranges are offsets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingRanges {
    pub height: [f64; 2],
    pub roll: [f64; 2],
    pub pitch: [f64; 2],
    pub yaw: [f64; 2],
    /// Horizontal base shift with the feet held in place.
    pub base_xy: [f64; 2],
    /// Per-foot horizontal jitter.
    pub foot_xy: [f64; 2],
}

impl Default for SamplingRanges {
    fn default() -> Self {
        Self { height: [-0.15, 0.15], roll: [-0.25, 0.25], pitch: [-0.25, 0.25], yaw: [-0.3, 0.3], base_xy: [-0.15, 0.15], foot_xy: [-0.1, 0.1] }
    }
}

impl SamplingRanges {
    pub fn named(&self) -> Vec<(String, [f64; 2])> {
        [("height", self.height), ("roll", self.roll), ("pitch", self.pitch), ("yaw", self.yaw), ("base_xy", self.base_xy), ("foot_xy", self.foot_xy)]
            .into_iter()
            .map(|(n, r)| (n.to_string(), r))
            .collect()
    }

    fn validate(&self) -> Result<(), SurrogateError> {
        for (name, [lo, hi]) in self.named() {
            if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(SurrogateError::InvalidConfig(format!("sampling range `{name}` = [{lo}, {hi}]")));
            }
        }
        Ok(())
    }
}

fn draw(rng: &mut impl Rng, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarginSample {
    pub input: Vec<f64>,
    pub target: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Momentum { beta: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub sample_count: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Multiplies the learning rate after every epoch.
    pub lr_decay: f64,
    pub epochs: usize,
    pub validation_fraction: f64,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            sample_count: 100_000,
            batch_size: 256,
            learning_rate: 1e-3,
            lr_decay: 0.94,
            epochs: 20,
            validation_fraction: 0.1,
            seed: 0,
            hidden: vec![512, 256, 128],
            optimizer: Optimizer::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 },
        }
    }
}

impl TrainConfig {
    /// Full-size dataset (5·10⁶ samples); hours on a single core.
    pub fn full_scale() -> Self {
        Self { sample_count: 5_000_000, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), SurrogateError> {
        let bad = |m: &str| Err(SurrogateError::InvalidConfig(m.to_string()));
        if self.sample_count == 0 || self.batch_size == 0 || self.epochs == 0 {
            return bad("sample_count, batch_size and epochs must be positive");
        }
        if !(self.learning_rate > 0.0) || !(self.lr_decay > 0.0) {
            return bad("learning_rate and lr_decay must be positive");
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad("validation_fraction must lie in (0, 1)");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden widths must be non-empty and positive");
        }
        Ok(())
    }
}

/// Draw one stance query: base pose perturbed around nominal, feet jittered on the ground.
pub fn sample_query(model: &KinematicModel, ranges: &SamplingRanges, rng: &mut impl Rng) -> (Configuration, Vec<Vector3<f64>>) {
    let base = Vector3::new(draw(rng, ranges.base_xy), draw(rng, ranges.base_xy), model.stance.height + draw(rng, ranges.height));
    let euler = Vector3::new(draw(rng, ranges.roll), draw(rng, ranges.pitch), draw(rng, ranges.yaw));
    let feet = model.stance.feet.iter().map(|f| f + Vector3::new(draw(rng, ranges.foot_xy), draw(rng, ranges.foot_xy), 0.0)).collect();
    (Configuration::new(base, euler, DVector::zeros(model.n_arm())), feet)
}

/// Oracle-labelled dataset. Each sample uses its own RNG stream, so the result
/// depends only on the seed, never on thread scheduling.
pub fn sample_dataset(
    model: &KinematicModel,
    cfg: &TrainConfig,
    ranges: &SamplingRanges,
    params: &RegionParams,
) -> Result<Vec<MarginSample>, SurrogateError> {
    if cfg.sample_count == 0 {
        return Err(SurrogateError::EmptyDataset);
    }
    ranges.validate()?;
    const MAX_DRAWS: usize = 100;
    let results: Vec<(usize, Option<MarginSample>)> = (0..cfg.sample_count)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64);
            for attempt in 1..=MAX_DRAWS {
                let (q, feet) = sample_query(model, ranges, &mut rng);
                let query = RegionQuery::from_configuration(&q, &feet);
                match margin_oracle(model, &query, params) {
                    Ok(target) => return Ok((attempt, Some(MarginSample { input: query.to_input(), target }))),
                    Err(ReachabilityError::StartOutsideRegion(_)) => {}
                    Err(e) => return Err(e),
                }
            }
            Ok((MAX_DRAWS, None))
        })
        .collect::<Result<_, ReachabilityError>>()?;
    let attempts: usize = results.iter().map(|(a, _)| a).sum();
    let accepted = results.iter().filter(|(_, s)| s.is_some()).count();
    let rejected = attempts - accepted;
    if accepted < cfg.sample_count || rejected * 10 > attempts * 9 {
        return Err(SurrogateError::RejectionRate { rejected, attempts });
    }
    Ok(results.into_iter().filter_map(|(_, s)| s).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out × in`.
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
}

/// Fully connected ReLU network with built-in input and output normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub layers: Vec<Layer>,
    pub input_mean: DVector<f64>,
    pub input_scale: DVector<f64>,
    pub output_mean: f64,
    pub output_scale: f64,
    /// Sampling ranges the network was trained on.
    pub metadata: Vec<(String, [f64; 2])>,
}

impl MlpModel {
    /// Network with identity normalization. Layer shapes must chain.
    pub fn new(layers: Vec<Layer>) -> Result<Self, SurrogateError> {
        let Some(first) = layers.first() else {
            return Err(SurrogateError::Format("network has no layers".into()));
        };
        let input_dim = first.weights.ncols();
        for (k, l) in layers.iter().enumerate() {
            if l.bias.len() != l.weights.nrows() {
                return Err(SurrogateError::Format(format!("layer {k}: bias length {} for {} rows", l.bias.len(), l.weights.nrows())));
            }
            if k > 0 && layers[k - 1].weights.nrows() != l.weights.ncols() {
                return Err(SurrogateError::Format(format!("layer {k} does not chain with layer {}", k - 1)));
            }
        }
        if layers.last().unwrap().weights.nrows() != 1 {
            return Err(SurrogateError::Format("output layer must have one row".into()));
        }
        Ok(Self {
            layers,
            input_mean: DVector::zeros(input_dim),
            input_scale: DVector::from_element(input_dim, 1.0),
            output_mean: 0.0,
            output_scale: 1.0,
            metadata: Vec::new(),
        })
    }

    /// He-uniform initialization.
    pub fn random(input_dim: usize, hidden: &[usize], rng: &mut impl Rng) -> Self {
        let mut widths = vec![input_dim];
        widths.extend_from_slice(hidden);
        widths.push(1);
        let layers = widths
            .windows(2)
            .map(|w| {
                let limit = (6.0 / w[0] as f64).sqrt();
                Layer { weights: DMatrix::from_fn(w[1], w[0], |_, _| rng.gen_range(-limit..limit)), bias: DVector::zeros(w[1]) }
            })
            .collect();
        Self::new(layers).expect("widths chain by construction")
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.ncols()
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1].iter().map(|l| l.weights.nrows()).collect()
    }

    fn check_input(&self, x: &[f64]) -> Result<(), SurrogateError> {
        if x.len() != self.input_dim() {
            return Err(SurrogateError::DimensionMismatch { expected: self.input_dim(), got: x.len() });
        }
        Ok(())
    }

    fn normalize(&self, x: &[f64]) -> DVector<f64> {
        DVector::from_fn(x.len(), |i, _| (x[i] - self.input_mean[i]) / self.input_scale[i])
    }

    /// Pre-activations of every layer.
    fn forward_trace(&self, x: &[f64]) -> Vec<DVector<f64>> {
        let mut a = self.normalize(x);
        let mut zs = Vec::with_capacity(self.layers.len());
        for (k, l) in self.layers.iter().enumerate() {
            let z = &l.weights * &a + &l.bias;
            if k + 1 < self.layers.len() {
                a = z.map(|v| v.max(0.0));
            }
            zs.push(z);
        }
        zs
    }

    pub fn infer(&self, x: &[f64]) -> Result<f64, SurrogateError> {
        self.check_input(x)?;
        let zs = self.forward_trace(x);
        Ok(zs.last().unwrap()[0] * self.output_scale + self.output_mean)
    }

    /// Exact backward pass; a unit sitting exactly at zero counts as inactive.
    pub fn input_gradient(&self, x: &[f64]) -> Result<DVector<f64>, SurrogateError> {
        Ok(self.infer_with_gradient(x)?.1)
    }

    /// Output and input gradient from a single forward pass.
    pub fn infer_with_gradient(&self, x: &[f64]) -> Result<(f64, DVector<f64>), SurrogateError> {
        self.check_input(x)?;
        let zs = self.forward_trace(x);
        let value = zs.last().unwrap()[0] * self.output_scale + self.output_mean;
        let last = self.layers.len() - 1;
        let mut g = self.layers[last].weights.row(0).transpose() * self.output_scale;
        for k in (0..last).rev() {
            let masked = g.zip_map(&zs[k], |gi, z| if z > 0.0 { gi } else { 0.0 });
            g = self.layers[k].weights.tr_mul(&masked);
        }
        Ok((value, g.component_div(&self.input_scale)))
    }

    /// Surrogate margin for a base configuration and world foot positions.
    pub fn margin(&self, q: &Configuration, feet_world: &[Vector3<f64>]) -> Result<f64, SurrogateError> {
        self.infer(&RegionQuery::from_configuration(q, feet_world).to_input())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MODEL_MAGIC);
        let u32le = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
        let f64le = |out: &mut Vec<u8>, v: f64| out.extend_from_slice(&v.to_le_bytes());
        u32le(&mut out, MODEL_VERSION as usize);
        u32le(&mut out, self.layers.len());
        for l in &self.layers {
            u32le(&mut out, l.weights.nrows());
            u32le(&mut out, l.weights.ncols());
        }
        for l in &self.layers {
            for r in 0..l.weights.nrows() {
                for c in 0..l.weights.ncols() {
                    f64le(&mut out, l.weights[(r, c)]);
                }
            }
            l.bias.iter().for_each(|v| f64le(&mut out, *v));
        }
        self.input_mean.iter().for_each(|v| f64le(&mut out, *v));
        self.input_scale.iter().for_each(|v| f64le(&mut out, *v));
        f64le(&mut out, self.output_mean);
        f64le(&mut out, self.output_scale);
        u32le(&mut out, self.metadata.len());
        for (name, [lo, hi]) in &self.metadata {
            u32le(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            f64le(&mut out, *lo);
            f64le(&mut out, *hi);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, SurrogateError> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(5)? != MODEL_MAGIC {
            return Err(SurrogateError::Format("missing RAKM1 header".into()));
        }
        let version = r.u32()?;
        if version != MODEL_VERSION {
            return Err(SurrogateError::Format(format!("unsupported version {version}")));
        }
        let n_layers = r.u32()? as usize;
        if n_layers == 0 || n_layers > 64 {
            return Err(SurrogateError::Format(format!("implausible layer count {n_layers}")));
        }
        let shapes = (0..n_layers).map(|_| Ok((r.u32()? as usize, r.u32()? as usize))).collect::<Result<Vec<_>, SurrogateError>>()?;
        let mut layers = Vec::with_capacity(n_layers);
        for (rows, cols) in shapes {
            let w = r.f64s(rows * cols)?;
            let weights = DMatrix::from_row_slice(rows, cols, &w);
            let bias = DVector::from_vec(r.f64s(rows)?);
            layers.push(Layer { weights, bias });
        }
        let mut model = Self::new(layers)?;
        let n = model.input_dim();
        model.input_mean = DVector::from_vec(r.f64s(n)?);
        model.input_scale = DVector::from_vec(r.f64s(n)?);
        model.output_mean = r.f64()?;
        model.output_scale = r.f64()?;
        let n_meta = r.u32()? as usize;
        for _ in 0..n_meta {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| SurrogateError::Format("metadata name is not UTF-8".into()))?;
            model.metadata.push((name, [r.f64()?, r.f64()?]));
        }
        if r.pos != bytes.len() {
            return Err(SurrogateError::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), SurrogateError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| SurrogateError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self, SurrogateError> {
        let bytes = std::fs::read(path).map_err(|source| SurrogateError::Io { path: path.display().to_string(), source })?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            SurrogateError::Format(m) => SurrogateError::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl ByteReader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], SurrogateError> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len()).ok_or_else(|| SurrogateError::Format("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, SurrogateError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, SurrogateError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, SurrogateError> {
        (0..n).map(|_| self.f64()).collect()
    }
}

/// Gradient of the surrogate margin with respect to base position and Euler angles.
///
/// Feet stay fixed in the world, so `∂f_b/∂p = -bRw` and the orientation
/// enters through `bRw` applied to both `e_z` and every lever arm.
pub fn margin_gradient_wrt_config(
    net: &MlpModel,
    kin: &KinematicModel,
    q: &Configuration,
    feet_world: &[Vector3<f64>],
) -> Result<Vector6<f64>, SurrogateError> {
    Ok(margin_and_gradient_wrt_config(net, kin, q, feet_world)?.1)
}

/// [`MlpModel::margin`] together with [`margin_gradient_wrt_config`], sharing one forward pass.
pub fn margin_and_gradient_wrt_config(
    net: &MlpModel,
    kin: &KinematicModel,
    q: &Configuration,
    feet_world: &[Vector3<f64>],
) -> Result<(f64, Vector6<f64>), SurrogateError> {
    q.check_pitch()?;
    if feet_world.len() != kin.legs.len() {
        return Err(SurrogateError::DimensionMismatch { expected: 3 + 3 * kin.legs.len(), got: 3 + 3 * feet_world.len() });
    }
    let query = RegionQuery::from_configuration(q, feet_world);
    let (m, g) = net.infer_with_gradient(&query.to_input())?;
    let r_bw = base_rotation(q);
    let dr = base_rotation_derivatives(&q.base_euler);
    let g_ez = Vector3::new(g[0], g[1], g[2]);
    let mut out = Vector6::zeros();
    for k in 0..3 {
        out[3 + k] = g_ez.dot(&(dr[k] * Vector3::z()));
    }
    for (i, f) in feet_world.iter().enumerate() {
        let gi = Vector3::new(g[3 + 3 * i], g[4 + 3 * i], g[5 + 3 * i]);
        let lever = f - q.base_pos;
        let dp = r_bw.transpose() * gi;
        for j in 0..3 {
            out[j] -= dp[j];
        }
        for k in 0..3 {
            out[3 + k] += gi.dot(&(dr[k] * lever));
        }
    }
    Ok((m, out))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean squared error in m².
    pub train_mse: f64,
    pub val_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub train_samples: usize,
    pub val_samples: usize,
    /// Held-out RMSE of the returned model, meters.
    pub val_rmse: f64,
}

fn mean_and_scale(rows: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = rows.clone().count() as f64;
    let mean = rows.clone().sum::<f64>() / n;
    let var = rows.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    (mean, if sd > 1e-8 { sd } else { 1.0 })
}

struct OptState {
    m: Vec<(DMatrix<f64>, DVector<f64>)>,
    v: Vec<(DMatrix<f64>, DVector<f64>)>,
    t: i32,
}

/// Mean squared error over `samples` (m²).
pub fn dataset_mse(net: &MlpModel, samples: &[&MarginSample]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let mut sse = 0.0;
    for chunk in samples.chunks(1024) {
        let pred = batch_forward(net, chunk).0.pop().unwrap();
        for (p, s) in pred.iter().zip(chunk) {
            sse += (p * net.output_scale + net.output_mean - s.target).powi(2);
        }
    }
    sse / samples.len() as f64
}

/// Normalized inputs and all pre-activations for a batch (columns are samples).
fn batch_forward(net: &MlpModel, batch: &[&MarginSample]) -> (Vec<DMatrix<f64>>, DMatrix<f64>) {
    let n_in = net.input_dim();
    let x = DMatrix::from_fn(n_in, batch.len(), |r, c| (batch[c].input[r] - net.input_mean[r]) / net.input_scale[r]);
    let mut zs = Vec::with_capacity(net.layers.len());
    let mut a = x.clone();
    for (k, l) in net.layers.iter().enumerate() {
        let mut z = &l.weights * &a;
        for mut col in z.column_iter_mut() {
            col += &l.bias;
        }
        if k + 1 < net.layers.len() {
            a = z.map(|v| v.max(0.0));
        }
        zs.push(z);
    }
    (zs, x)
}

/// Fit the surrogate by minibatch descent on normalized MSE.
pub fn train(dataset: &[MarginSample], cfg: &TrainConfig, ranges: &SamplingRanges) -> Result<(MlpModel, TrainReport), SurrogateError> {
    cfg.validate()?;
    let Some(first) = dataset.first() else {
        return Err(SurrogateError::EmptyDataset);
    };
    let n_in = first.input.len();
    if let Some(bad) = dataset.iter().find(|s| s.input.len() != n_in) {
        return Err(SurrogateError::DimensionMismatch { expected: n_in, got: bad.input.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_7ea1);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((dataset.len() as f64 * cfg.validation_fraction).round() as usize).clamp(1, dataset.len().saturating_sub(1).max(1));
    let (val_idx, train_idx) = order.split_at(n_val);
    let train_set: Vec<&MarginSample> = train_idx.iter().map(|i| &dataset[*i]).collect();
    let val_set: Vec<&MarginSample> = val_idx.iter().map(|i| &dataset[*i]).collect();
    if train_set.is_empty() {
        return Err(SurrogateError::EmptyDataset);
    }

    let mut net = MlpModel::random(n_in, &cfg.hidden, &mut rng);
    for i in 0..n_in {
        let (m, s) = mean_and_scale(train_set.iter().map(|t| t.input[i]));
        net.input_mean[i] = m;
        net.input_scale[i] = s;
    }
    let (m, s) = mean_and_scale(train_set.iter().map(|t| t.target));
    net.output_mean = m;
    net.output_scale = s;
    net.metadata = ranges.named();

    let zeros = |net: &MlpModel| net.layers.iter().map(|l| (l.weights.map(|_| 0.0), l.bias.map(|_| 0.0))).collect::<Vec<_>>();
    let mut state = OptState { m: zeros(&net), v: zeros(&net), t: 0 };
    let mut lr = cfg.learning_rate;
    let mut stats = Vec::with_capacity(cfg.epochs);
    let mut shuffled = train_set.clone();
    for epoch in 0..cfg.epochs {
        shuffled.shuffle(&mut rng);
        for batch in shuffled.chunks(cfg.batch_size) {
            let grads = batch_gradients(&net, batch);
            apply_update(&mut net, &grads, &mut state, &cfg.optimizer, lr);
        }
        lr *= cfg.lr_decay;
        stats.push(EpochStats { epoch, train_mse: dataset_mse(&net, &train_set), val_mse: dataset_mse(&net, &val_set) });
    }
    let val_rmse = stats.last().map(|s| s.val_mse.sqrt()).unwrap_or(f64::NAN);
    let report = TrainReport { epochs: stats, train_samples: train_set.len(), val_samples: val_set.len(), val_rmse };
    Ok((net, report))
}

/// Gradients of the normalized batch MSE.
fn batch_gradients(net: &MlpModel, batch: &[&MarginSample]) -> Vec<(DMatrix<f64>, DVector<f64>)> {
    let (zs, x) = batch_forward(net, batch);
    let n = batch.len() as f64;
    let last = net.layers.len() - 1;
    let mut dz = DMatrix::from_fn(1, batch.len(), |_, c| {
        let y = (batch[c].target - net.output_mean) / net.output_scale;
        2.0 * (zs[last][(0, c)] - y) / n
    });
    let mut grads = vec![(DMatrix::zeros(0, 0), DVector::zeros(0)); net.layers.len()];
    for k in (0..=last).rev() {
        let a_prev = if k == 0 { x.clone() } else { zs[k - 1].map(|v| v.max(0.0)) };
        let gw = &dz * a_prev.transpose();
        let gb = DVector::from_iterator(dz.nrows(), dz.row_iter().map(|r| r.sum()));
        if k > 0 {
            let mut da = net.layers[k].weights.tr_mul(&dz);
            da.zip_apply(&zs[k - 1], |g, z| {
                if z <= 0.0 {
                    *g = 0.0
                }
            });
            dz = da;
        }
        grads[k] = (gw, gb);
    }
    grads
}

fn apply_update(net: &mut MlpModel, grads: &[(DMatrix<f64>, DVector<f64>)], st: &mut OptState, opt: &Optimizer, lr: f64) {
    st.t += 1;
    for (k, layer) in net.layers.iter_mut().enumerate() {
        let (gw, gb) = &grads[k];
        match *opt {
            Optimizer::Momentum { beta } => {
                let (mw, mb) = &mut st.m[k];
                *mw = &*mw * beta + gw;
                *mb = &*mb * beta + gb;
                layer.weights -= &*mw * lr;
                layer.bias -= &*mb * lr;
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                let c1 = 1.0 - beta1.powi(st.t);
                let c2 = 1.0 - beta2.powi(st.t);
                let (mw, mb) = &mut st.m[k];
                let (vw, vb) = &mut st.v[k];
                mw.zip_apply(gw, |m, g| *m = beta1 * *m + (1.0 - beta1) * g);
                mb.zip_apply(gb, |m, g| *m = beta1 * *m + (1.0 - beta1) * g);
                vw.zip_apply(gw, |v, g| *v = beta2 * *v + (1.0 - beta2) * g * g);
                vb.zip_apply(gb, |v, g| *v = beta2 * *v + (1.0 - beta2) * g * g);
                let step = |w: &mut f64, m: f64, v: f64| *w -= lr * (m / c1) / ((v / c2).sqrt() + eps);
                for ((w, m), v) in layer.weights.iter_mut().zip(mw.iter()).zip(vw.iter()) {
                    step(w, *m, *v);
                }
                for ((w, m), v) in layer.bias.iter_mut().zip(mb.iter()).zip(vb.iter()) {
                    step(w, *m, *v);
                }
            }
        }
    }
}
