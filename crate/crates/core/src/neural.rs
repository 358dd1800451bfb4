//! A small trainable network: a residual tanh MLP encoder over input embeddings
//! feeding two affine heads (IND and OOD) whose outputs are concatenated into
//! one (N+M)-way logit vector.
//!
//! All parameters live in one flat `Vec<f64>` described by a block layout,
//! so gradients, optimiser buffers, finite-difference checks and checkpoints
//! all share the same indexing.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, validation, Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub input: usize,
    pub repr: usize,
    pub n_ind: usize,
    pub n_ood: usize,
    /// Number of affine + tanh layers in the encoder.
    pub encoder_layers: usize,
}

impl ModelDims {
    pub fn new(input: usize, n_ind: usize, n_ood: usize) -> Self {
        ModelDims {
            input,
            repr: input,
            n_ind,
            n_ood,
            encoder_layers: 1,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.n_ind + self.n_ood
    }

    fn validate(&self) -> Result<()> {
        if self.input == 0 || self.repr == 0 || self.encoder_layers == 0 {
            return Err(config_err!("model dimensions must be positive: {self:?}"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl Block {
    fn len(&self) -> usize {
        self.rows * self.cols
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointModel {
    pub dims: ModelDims,
    pub layout: Vec<Block>,
    pub params: Vec<f64>,
}

#[derive(Clone, Copy)]
enum Part {
    Encoder(usize),
    Ind,
    Ood,
}

impl JointModel {
    /// Weights and biases uniform in ±1/√fan_in.
    pub fn new(dims: ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut layout = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, rows: usize, cols: usize| {
            layout.push(Block {
                name,
                rows,
                cols,
                offset,
            });
            offset += rows * cols;
        };
        for l in 0..dims.encoder_layers {
            let fan_in = if l == 0 { dims.input } else { dims.repr };
            push(format!("encoder.{l}.weight"), dims.repr, fan_in);
            push(format!("encoder.{l}.bias"), dims.repr, 1);
        }
        push("ind_head.weight".into(), dims.n_ind, dims.repr);
        push("ind_head.bias".into(), dims.n_ind, 1);
        push("ood_head.weight".into(), dims.n_ood, dims.repr);
        push("ood_head.bias".into(), dims.n_ood, 1);
        let mut model = JointModel {
            dims,
            layout,
            params: vec![0.0; offset],
        };
        let mut rng = rng::seeded(seed);
        for part in model.parts() {
            model.init_part(part, &mut rng);
        }
        Ok(model)
    }

    fn parts(&self) -> Vec<Part> {
        let mut p: Vec<Part> = (0..self.dims.encoder_layers).map(Part::Encoder).collect();
        p.extend([Part::Ind, Part::Ood]);
        p
    }

    fn block_index(&self, part: Part) -> usize {
        match part {
            Part::Encoder(l) => 2 * l,
            Part::Ind => 2 * self.dims.encoder_layers,
            Part::Ood => 2 * self.dims.encoder_layers + 2,
        }
    }

    fn init_part(&mut self, part: Part, rng: &mut rng::GidRng) {
        let wi = self.block_index(part);
        let fan_in = self.layout[wi].cols;
        let bound = 1.0 / (fan_in as f64).sqrt();
        for bi in [wi, wi + 1] {
            let b = &self.layout[bi];
            for v in &mut self.params[b.offset..b.offset + b.len()] {
                *v = rng.random_range(-bound..=bound);
            }
        }
    }

    fn zero_part(&mut self, part: Part) {
        let wi = self.block_index(part);
        for bi in [wi, wi + 1] {
            let b = self.layout[bi].clone();
            self.params[b.offset..b.offset + b.len()].fill(0.0);
        }
    }

    /// Zero both heads, keeping the encoder.
    pub fn zero_heads(&mut self) {
        self.zero_part(Part::Ind);
        self.zero_part(Part::Ood);
    }

    pub fn reinit_ood_head(&mut self, seed: u64) {
        let mut rng = rng::seeded(seed);
        self.init_part(Part::Ood, &mut rng);
    }

    /// Copy encoder parameters from a model with the same encoder shape.
    pub fn copy_encoder_from(&mut self, other: &JointModel) -> Result<()> {
        let end = self.block_index(Part::Ind);
        if self.layout[..end] != other.layout[..end] {
            return Err(validation!("encoder layouts differ"));
        }
        let n = self.layout[end].offset;
        self.params[..n].copy_from_slice(&other.params[..n]);
        Ok(())
    }

    /// Copy the IND head from a model with the same shape.
    pub fn copy_ind_head_from(&mut self, other: &JointModel) -> Result<()> {
        let wi = self.block_index(Part::Ind);
        if self.layout != other.layout {
            return Err(validation!("model layouts differ"));
        }
        let start = self.layout[wi].offset;
        let end = self.layout[wi + 1].offset + self.layout[wi + 1].len();
        self.params[start..end].copy_from_slice(&other.params[start..end]);
        Ok(())
    }

    fn weight(&self, part: Part) -> ArrayView2<'_, f64> {
        let b = &self.layout[self.block_index(part)];
        ArrayView2::from_shape((b.rows, b.cols), &self.params[b.offset..b.offset + b.len()])
            .expect("layout matches params")
    }

    fn bias(&self, part: Part) -> ArrayView1<'_, f64> {
        let b = &self.layout[self.block_index(part) + 1];
        ArrayView1::from(&self.params[b.offset..b.offset + b.rows])
    }

    fn check_input(&self, x: &Array2<f64>) -> Result<()> {
        if x.ncols() != self.dims.input {
            return Err(validation!(
                "batch has {} columns, encoder expects {}",
                x.ncols(),
                self.dims.input
            ));
        }
        Ok(())
    }

    /// Layer outputs and their tanh parts. A layer whose input and output
    /// widths match adds its input back: `h = x + tanh(W x + b)`. The dropout
    /// mask scales the tanh branch of the last layer, so the skip path is
    /// never dropped.
    fn encoder_activations(
        &self,
        x: &Array2<f64>,
        mask: Option<&Array2<f64>>,
    ) -> (Vec<Array2<f64>>, Vec<Array2<f64>>) {
        let layers = self.dims.encoder_layers;
        let mut acts: Vec<Array2<f64>> = Vec::with_capacity(layers);
        let mut tanhs = Vec::with_capacity(layers);
        for l in 0..layers {
            let input = if l == 0 { x } else { &acts[l - 1] };
            let mut z = input.dot(&self.weight(Part::Encoder(l)).t());
            z += &self.bias(Part::Encoder(l));
            z.mapv_inplace(f64::tanh);
            let mut branch = z.clone();
            if let (Some(m), true) = (mask, l + 1 == layers) {
                branch *= m;
            }
            let h = if input.ncols() == z.ncols() { branch + input } else { branch };
            tanhs.push(z);
            acts.push(h);
        }
        (acts, tanhs)
    }

    /// Encoder output without dropout.
    pub fn encode(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        Ok(self.encoder_activations(x, None).0.pop().expect("at least one layer"))
    }

    fn heads(&self, r: &Array2<f64>) -> Array2<f64> {
        let (n, m) = (self.dims.n_ind, self.dims.n_ood);
        let mut logits = Array2::zeros((r.nrows(), n + m));
        let mut ind = r.dot(&self.weight(Part::Ind).t());
        ind += &self.bias(Part::Ind);
        let mut ood = r.dot(&self.weight(Part::Ood).t());
        ood += &self.bias(Part::Ood);
        logits.slice_mut(s![.., ..n]).assign(&ind);
        logits.slice_mut(s![.., n..]).assign(&ood);
        logits
    }

    /// Forward pass. `mask` (already scaled by 1/(1-p)) multiplies the
    /// last encoder layer's tanh branch; `None` is evaluation mode.
    pub fn forward_masked(&self, x: &Array2<f64>, mask: Option<Array2<f64>>) -> Result<Forward> {
        self.check_input(x)?;
        if let Some(m) = &mask {
            if m.dim() != (x.nrows(), self.dims.repr) {
                return Err(validation!(
                    "dropout mask shape {:?} != {:?}",
                    m.dim(),
                    (x.nrows(), self.dims.repr)
                ));
            }
        }
        let (acts, tanhs) = self.encoder_activations(x, mask.as_ref());
        let logits = self.heads(acts.last().expect("at least one layer"));
        Ok(Forward {
            input: x.clone(),
            acts,
            tanhs,
            mask,
            logits,
        })
    }

    /// Evaluation-mode logits.
    pub fn logits(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_masked(x, None)?.logits)
    }

    /// Accumulate parameter gradients for `dlogits` (∂loss/∂logits) into `grads`.
    pub fn backward(&self, fwd: &Forward, dlogits: &Array2<f64>, grads: &mut [f64]) {
        assert_eq!(grads.len(), self.params.len());
        assert_eq!(dlogits.dim(), fwd.logits.dim());
        let n = self.dims.n_ind;
        let d_ind = dlogits.slice(s![.., ..n]);
        let d_ood = dlogits.slice(s![.., n..]);

        let acc = |part: Part, dz: ArrayView2<f64>, input: &Array2<f64>, grads: &mut [f64]| {
            let wi = self.block_index(part);
            let (wb, bb) = (&self.layout[wi], &self.layout[wi + 1]);
            let gw = dz.t().dot(input);
            for (g, v) in grads[wb.offset..wb.offset + wb.len()].iter_mut().zip(gw.iter()) {
                *g += v;
            }
            let gb = dz.sum_axis(Axis(0));
            for (g, v) in grads[bb.offset..bb.offset + bb.rows].iter_mut().zip(gb.iter()) {
                *g += v;
            }
        };
        let repr = fwd.representation();
        acc(Part::Ind, d_ind, repr, grads);
        acc(Part::Ood, d_ood, repr, grads);

        let layers = self.dims.encoder_layers;
        let mut dh = d_ind.dot(&self.weight(Part::Ind)) + d_ood.dot(&self.weight(Part::Ood));
        for l in (0..layers).rev() {
            let t = &fwd.tanhs[l];
            let mut dz = &dh * &t.mapv(|v| 1.0 - v * v);
            if let (Some(m), true) = (&fwd.mask, l + 1 == layers) {
                dz *= m;
            }
            let input = if l == 0 { &fwd.input } else { &fwd.acts[l - 1] };
            acc(Part::Encoder(l), dz.view(), input, grads);
            if l == 0 {
                break;
            }
            let skip = input.ncols() == t.ncols();
            let dx = dz.dot(&self.weight(Part::Encoder(l)));
            dh = if skip { dx + &dh } else { dx };
        }
    }
}

/// Cached activations of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    input: Array2<f64>,
    acts: Vec<Array2<f64>>,
    tanhs: Vec<Array2<f64>>,
    mask: Option<Array2<f64>>,
    pub logits: Array2<f64>,
}

impl Forward {
    /// Encoder output after dropout.
    pub fn representation(&self) -> &Array2<f64> {
        self.acts.last().expect("at least one layer")
    }
}

/// Inverted-dropout mask: entries are 0 with probability `p`, else 1/(1-p).
pub fn dropout_mask(shape: (usize, usize), p: f64, rng: &mut rng::GidRng) -> Result<Array2<f64>> {
    if !(0.0..1.0).contains(&p) {
        return Err(validation!("dropout probability must be in [0, 1), got {p}"));
    }
    if p == 0.0 {
        return Ok(Array2::ones(shape));
    }
    let keep = 1.0 / (1.0 - p);
    Ok(Array2::from_shape_fn(shape, |_| {
        if rng.random::<f64>() < p {
            0.0
        } else {
            keep
        }
    }))
}

/// Training-mode forward with a dropout mask drawn from `rng_seed`.
pub fn forward(model: &JointModel, batch: &Array2<f64>, dropout_p: f64, rng_seed: u64) -> Result<Forward> {
    model.check_input(batch)?;
    let mut rng = rng::seeded(rng_seed);
    let mask = dropout_mask((batch.nrows(), model.dims.repr), dropout_p, &mut rng)?;
    model.forward_masked(batch, Some(mask))
}

/// Encoder outputs of the same batch under two independent dropout masks.
pub fn dropout_views(
    model: &JointModel,
    x: &Array2<f64>,
    p: f64,
    seed: u64,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let shape = (x.nrows(), model.dims.repr);
    let m1 = dropout_mask(shape, p, &mut rng::derive(seed, 1))?;
    let m2 = dropout_mask(shape, p, &mut rng::derive(seed, 2))?;
    let a = model.forward_masked(x, Some(m1))?.representation().clone();
    let b = model.forward_masked(x, Some(m2))?.representation().clone();
    Ok((a, b))
}

/// Soft target over the N+M joint classes.
#[derive(Debug, Clone, PartialEq)]
pub struct JointLabel(pub Vec<f64>);

impl JointLabel {
    /// `[one_hot(class); 0_M]`.
    pub fn ind(class: usize, n_ind: usize, n_ood: usize) -> Self {
        let mut v = vec![0.0; n_ind + n_ood];
        v[class] = 1.0;
        JointLabel(v)
    }

    /// `[0_N; pseudo]` where `pseudo` is a distribution over the M OOD classes.
    pub fn ood(pseudo: &[f64], n_ind: usize) -> Self {
        let mut v = vec![0.0; n_ind];
        v.extend_from_slice(pseudo);
        JointLabel(v)
    }
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    logits.iter().map(|v| v - lse).collect()
}

/// Soft-target cross-entropy and its gradient `softmax(logits) - target`.
pub fn cross_entropy(logits: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    debug_assert_eq!(logits.len(), target.len());
    let ls = log_softmax(logits);
    let loss = -ls
        .iter()
        .zip(target)
        .filter(|(_, &t)| t != 0.0)
        .map(|(l, t)| t * l)
        .sum::<f64>();
    let grad = ls.iter().zip(target).map(|(l, t)| l.exp() - t).collect();
    (loss, grad)
}

/// Row-wise cross-entropy. Returns the summed loss and per-row gradients.
pub fn batch_cross_entropy(logits: &Array2<f64>, targets: &Array2<f64>) -> (f64, Array2<f64>) {
    assert_eq!(logits.dim(), targets.dim());
    let mut total = 0.0;
    let mut grad = Array2::zeros(logits.dim());
    for ((l, t), mut g) in logits
        .axis_iter(Axis(0))
        .zip(targets.axis_iter(Axis(0)))
        .zip(grad.axis_iter_mut(Axis(0)))
    {
        let (loss, gr) = cross_entropy(&l.to_vec(), &t.to_vec());
        total += loss;
        g.assign(&Array1::from(gr));
    }
    (total, grad)
}

/// SGD with momentum and L2 weight decay folded into the velocity:
/// `v ← μ v + g + wd θ`, `θ ← θ − lr v`.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: Vec<f64>,
    pub steps: u64,
}

impl OptimizerState {
    pub fn new(n_params: usize, momentum: f64, weight_decay: f64) -> Self {
        OptimizerState {
            momentum,
            weight_decay,
            velocity: vec![0.0; n_params],
            steps: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), self.velocity.len());
        assert_eq!(grads.len(), self.velocity.len());
        for ((p, v), g) in params.iter_mut().zip(&mut self.velocity).zip(grads) {
            *v = self.momentum * *v + g + self.weight_decay * *p;
            *p -= lr * *v;
        }
        self.steps += 1;
    }
}

pub fn sgd_step(model: &mut JointModel, grads: &[f64], state: &mut OptimizerState, lr: f64) {
    state.step(&mut model.params, grads, lr);
}

/// Linear warm-up followed by cosine annealing, indexed by epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub lr_base: f64,
    pub lr_min: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            lr_base: 0.4,
            lr_min: 0.01,
            warmup_epochs: 10,
            total_epochs: 100,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr_base) {
            return Err(config_err!(
                "need 0 < lr_min <= lr_base, got {} and {}",
                self.lr_min,
                self.lr_base
            ));
        }
        if self.warmup_epochs >= self.total_epochs {
            return Err(config_err!(
                "warmup_epochs {} must be below total_epochs {}",
                self.warmup_epochs,
                self.total_epochs
            ));
        }
        Ok(())
    }
}

pub fn lr_at(schedule: &ScheduleConfig, epoch: usize) -> Result<f64> {
    schedule.validate()?;
    if epoch >= schedule.total_epochs {
        return Err(validation!(
            "epoch {epoch} outside schedule of {} epochs",
            schedule.total_epochs
        ));
    }
    let s = schedule;
    if epoch < s.warmup_epochs {
        return Ok(s.lr_base * (epoch + 1) as f64 / s.warmup_epochs as f64);
    }
    let span = s.total_epochs - 1 - s.warmup_epochs;
    let progress = if span == 0 {
        0.0
    } else {
        (epoch - s.warmup_epochs) as f64 / span as f64
    };
    Ok(s.lr_min + 0.5 * (s.lr_base - s.lr_min) * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub dims: ModelDims,
    pub n_ind: usize,
    pub n_ood: usize,
    pub seed: u64,
    pub epoch: usize,
    pub blocks: Vec<Block>,
}

/// Write a checkpoint: one line of JSON header, then every parameter block
/// as little-endian f32 in layout order.
pub fn save_checkpoint(model: &JointModel, path: &Path, seed: u64, epoch: usize) -> Result<()> {
    let header = CheckpointHeader {
        dims: model.dims,
        n_ind: model.dims.n_ind,
        n_ood: model.dims.n_ood,
        seed,
        epoch,
        blocks: model.layout.clone(),
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut bytes = serde_json::to_vec(&header)?;
    bytes.push(b'\n');
    for p in &model.params {
        bytes.extend_from_slice(&(*p as f32).to_le_bytes());
    }
    w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(JointModel, CheckpointHeader)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut line = Vec::new();
    r.read_until(b'\n', &mut line).map_err(|e| Error::io(path, e))?;
    let header: CheckpointHeader = serde_json::from_slice(&line)
        .map_err(|e| Error::format(path, format!("bad checkpoint header: {e}")))?;
    let mut model = JointModel::new(header.dims, 0)?;
    if model.layout != header.blocks {
        return Err(Error::format(path, "block layout does not match dims"));
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(|e| Error::io(path, e))?;
    if rest.len() != model.params.len() * 4 {
        return Err(Error::format(
            path,
            format!("expected {} parameter bytes, found {}", model.params.len() * 4, rest.len()),
        ));
    }
    for (p, c) in model.params.iter_mut().zip(rest.chunks_exact(4)) {
        *p = f32::from_le_bytes(c.try_into().unwrap()) as f64;
    }
    Ok((model, header))
}
