//! MLP classifier parameters and their lifecycle: initialization, SGD
//! updates, weight averaging and checkpoint files.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffcore::tape::{matmul_raw, transpose_raw};
use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Layer widths of an MLP: `input_dim -> hidden[0] -> ... -> num_classes`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub num_classes: usize,
}

impl ModelDims {
    pub fn new(input_dim: usize, hidden: Vec<usize>, num_classes: usize) -> Result<Self> {
        let dims = ModelDims {
            input_dim,
            hidden,
            num_classes,
        };
        dims.validate()?;
        Ok(dims)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::domain(format!(
                "a classifier needs at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.input_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::domain("layer widths must be positive"));
        }
        Ok(())
    }

    /// `(out, in)` for every layer in order.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut widths = Vec::with_capacity(self.hidden.len() + 2);
        widths.push(self.input_dim);
        widths.extend(&self.hidden);
        widths.push(self.num_classes);
        widths.windows(2).map(|w| (w[1], w[0])).collect()
    }
}

/// One affine layer; `weight` is `[out, in]`, `bias` is `[out]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Parameters of the classifier. The same structure doubles as a gradient
/// container and as momentum state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    dims: ModelDims,
    layers: Vec<Layer>,
}

/// Parameter handles bound onto a tape for one forward pass.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<(Var, Var)>,
}

impl ModelParams {
    /// He-scaled normal weights truncated at three standard deviations;
    /// zero biases.
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = dims
            .layer_shapes()
            .into_iter()
            .map(|(out, inp)| {
                let std = (2.0 / inp as f64).sqrt();
                let weights = (0..out * inp)
                    .map(|_| std * truncated_normal(&mut rng))
                    .collect();
                Layer {
                    weight: Tensor::matrix(out, inp, weights).expect("layer shape"),
                    bias: Tensor::zeros(vec![out]),
                }
            })
            .collect();
        Ok(ModelParams { dims, layers })
    }

    pub fn zeros(dims: ModelDims) -> Result<Self> {
        dims.validate()?;
        let layers = dims
            .layer_shapes()
            .into_iter()
            .map(|(out, inp)| Layer {
                weight: Tensor::zeros(vec![out, inp]),
                bias: Tensor::zeros(vec![out]),
            })
            .collect();
        Ok(ModelParams { dims, layers })
    }

    pub fn from_layers(dims: ModelDims, layers: Vec<Layer>) -> Result<Self> {
        dims.validate()?;
        let shapes = dims.layer_shapes();
        if shapes.len() != layers.len() {
            return Err(Error::shape(
                "model",
                format!("{} layers for {} shapes", layers.len(), shapes.len()),
            ));
        }
        for (i, ((out, inp), layer)) in shapes.iter().zip(&layers).enumerate() {
            if layer.weight.shape() != [*out, *inp] || layer.bias.shape() != [*out] {
                return Err(Error::shape(
                    "model",
                    format!(
                        "layer {i}: expected weight [{out}, {inp}] and bias [{out}], got {:?} and {:?}",
                        layer.weight.shape(),
                        layer.bias.shape()
                    ),
                ));
            }
        }
        Ok(ModelParams { dims, layers })
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn num_classes(&self) -> usize {
        self.dims.num_classes
    }

    pub fn num_params(&self) -> usize {
        self.buffers().map(|b| b.len()).sum()
    }

    /// Weight and bias buffers, layer by layer.
    pub fn buffers(&self) -> impl Iterator<Item = &[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.values(), l.bias.values()])
    }

    pub fn buffers_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.values_mut(), l.bias.values_mut()])
    }

    /// Order-sensitive digest of the exact bit patterns of every parameter.
    pub fn checksum(&self) -> u64 {
        self.buffers().flatten().fold(0xcbf2_9ce4_8422_2325, |h, v| {
            (h ^ v.to_bits()).wrapping_mul(0x0100_0000_01b3)
        })
    }

    pub fn is_finite(&self) -> bool {
        self.buffers().flatten().all(|v| v.is_finite())
    }

    fn check_compatible(&self, other: &ModelParams, op: &'static str) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.dims, other.dims),
            ));
        }
        Ok(())
    }

    /// Records the parameters as leaves of `tape`.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Result<BoundParams> {
        let vars = self
            .layers
            .iter()
            .map(|l| {
                Ok((
                    tape.leaf(l.weight.clone(), requires_grad)?,
                    tape.leaf(l.bias.clone(), requires_grad)?,
                ))
            })
            .collect::<Result<_>>()?;
        Ok(BoundParams { vars })
    }

    /// Logits of `x` (shape `[batch, input_dim]`) recorded on `tape`.
    pub fn forward(&self, tape: &mut Tape, bound: &BoundParams, x: Var) -> Result<Var> {
        let last = bound.vars.len() - 1;
        let mut h = x;
        for (i, &(w, b)) in bound.vars.iter().enumerate() {
            let wt = tape.transpose(w)?;
            let z = tape.matmul(h, wt)?;
            h = tape.add(z, b)?;
            if i != last {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    /// Gradients of the bound parameters after a backward pass.
    pub fn gradients(&self, tape: &Tape, bound: &BoundParams) -> Result<ModelParams> {
        let layers = bound
            .vars
            .iter()
            .map(|&(w, b)| {
                let missing = || Error::contract("parameter gradient missing; was backward run?");
                Ok(Layer {
                    weight: tape.grad(w).ok_or_else(missing)?.clone(),
                    bias: tape.grad(b).ok_or_else(missing)?.clone(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(ModelParams {
            dims: self.dims.clone(),
            layers,
        })
    }

    fn check_input(&self, x: &Tensor) -> Result<usize> {
        match x.dims2() {
            Some((rows, cols)) if cols == self.dims.input_dim => Ok(rows),
            _ => Err(Error::shape(
                "forward",
                format!(
                    "expected [batch, {}], got {:?}",
                    self.dims.input_dim,
                    x.shape()
                ),
            )),
        }
    }

    /// Tape-free forward pass. Produces bit-identical logits to
    /// [`ModelParams::forward`].
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let rows = self.check_input(x)?;
        let (logits, _) = self.forward_raw(x.values(), rows, false);
        Tensor::matrix(rows, self.dims.num_classes, logits)
    }

    /// Logits together with the pre-activation of every hidden unit.
    pub(crate) fn forward_with_preactivations(&self, x: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
        let rows = self.check_input(x)?;
        Ok(self.forward_raw(x.values(), rows, true))
    }

    fn forward_raw(&self, x: &[f64], rows: usize, keep: bool) -> (Vec<f64>, Vec<f64>) {
        let last = self.layers.len() - 1;
        let mut pre = Vec::new();
        let mut h = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let (out, inp) = layer.weight.dims2().expect("weight matrix");
            let wt = transpose_raw(layer.weight.values(), out, inp);
            let mut z = matmul_raw(&h, &wt, rows, inp, out);
            for row in z.chunks_exact_mut(out) {
                row.iter_mut()
                    .zip(layer.bias.values())
                    .for_each(|(v, b)| *v += b);
            }
            if i != last {
                if keep {
                    pre.extend_from_slice(&z);
                }
                z.iter_mut().for_each(|v| *v = if *v > 0.0 { *v } else { 0.0 });
            }
            h = z;
        }
        (h, pre)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits(x)?;
        Ok(logits
            .values()
            .chunks_exact(self.dims.num_classes)
            .map(argmax)
            .collect())
    }
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn truncated_normal<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 3.0 {
            return z;
        }
    }
}

/// Stochastic gradient descent with heavy-ball momentum and L2 weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// `(fraction of total epochs, divisor)`: from that point on the
    /// learning rate is divided by `divisor` (cumulatively).
    pub lr_schedule: Vec<(f64, f64)>,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_schedule: vec![(0.5, 10.0), (0.75, 10.0)],
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::domain("learning rate must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::domain("momentum must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::domain("weight decay must be >= 0"));
        }
        let mut prev = 0.0;
        for &(fraction, divisor) in &self.lr_schedule {
            if !(fraction > prev && fraction <= 1.0) {
                return Err(Error::domain(
                    "learning-rate schedule fractions must increase strictly within (0, 1]",
                ));
            }
            if !(divisor > 0.0) {
                return Err(Error::domain("learning-rate divisors must be positive"));
            }
            prev = fraction;
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based) of `total_epochs`.
    pub fn learning_rate_at(&self, epoch: usize, total_epochs: usize) -> f64 {
        let progress = epoch as f64 / total_epochs.max(1) as f64;
        self.lr_schedule
            .iter()
            .filter(|(fraction, _)| progress >= *fraction)
            .fold(self.learning_rate, |lr, (_, divisor)| lr / divisor)
    }
}

/// Momentum buffers carried across steps.
#[derive(Debug, Clone, Default)]
pub struct SgdState {
    velocity: Option<ModelParams>,
}

impl SgdState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One SGD step: `v <- momentum * v + (g + wd * theta)`, `theta <- theta - lr * v`.
/// With zero momentum and weight decay this is exactly `theta - lr * g`.
pub fn sgd_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut SgdState,
    config: &SgdConfig,
    learning_rate: f64,
) -> Result<()> {
    params.check_compatible(grads, "sgd_step")?;
    for (b, buf) in grads.buffers().enumerate() {
        if let Some(i) = buf.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("gradient buffer {b} at flat index {i}"),
            });
        }
    }
    let use_velocity = config.momentum != 0.0;
    if use_velocity && state.velocity.is_none() {
        state.velocity = Some(ModelParams::zeros(params.dims.clone())?);
    }
    let mut velocity = state.velocity.take();
    {
        let mut vel_bufs: Vec<&mut [f64]> = match velocity.as_mut() {
            Some(v) if use_velocity => v.buffers_mut().collect(),
            _ => Vec::new(),
        };
        for (bi, (theta, g)) in params.buffers_mut().zip(grads.buffers()).enumerate() {
            for (j, (t, &gj)) in theta.iter_mut().zip(g).enumerate() {
                let mut d = gj;
                if config.weight_decay != 0.0 {
                    d += config.weight_decay * *t;
                }
                if use_velocity {
                    let v = &mut vel_bufs[bi][j];
                    *v = config.momentum * *v + d;
                    d = *v;
                }
                *t -= learning_rate * d;
            }
        }
    }
    state.velocity = velocity;
    Ok(())
}

/// `decay * avg + (1 - decay) * current`, elementwise.
pub fn average_update(avg: &ModelParams, current: &ModelParams, decay: f64) -> Result<ModelParams> {
    avg.check_compatible(current, "average_update")?;
    if !(0.0..1.0).contains(&decay) {
        return Err(Error::domain(format!("averaging decay {decay} outside [0, 1)")));
    }
    let mut out = avg.clone();
    for (o, c) in out.buffers_mut().zip(current.buffers()) {
        for (a, &x) in o.iter_mut().zip(c) {
            *a = decay * *a + (1.0 - decay) * x;
        }
    }
    Ok(out)
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"FTATCKP1";

/// Self-describing binary snapshot of a model.
///
/// Layout (little endian): magic, `u64` seed, `u64` epoch, `u32` input dim,
/// `u32` hidden count, `u32` per hidden width, `u32` classes, then every
/// weight and bias buffer as raw `f64` bit patterns.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub epoch: u64,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let dims = self.params.dims();
        let mut out = Vec::with_capacity(64 + self.params.num_params() * 8);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&(dims.input_dim as u32).to_le_bytes());
        out.extend_from_slice(&(dims.hidden.len() as u32).to_le_bytes());
        for &h in &dims.hidden {
            out.extend_from_slice(&(h as u32).to_le_bytes());
        }
        out.extend_from_slice(&(dims.num_classes as u32).to_le_bytes());
        for v in self.params.buffers().flatten() {
            out.extend_from_slice(&v.to_bits().to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let seed = read_u64(&mut r)?;
        let epoch = read_u64(&mut r)?;
        let input_dim = read_u32(&mut r)? as usize;
        let n_hidden = read_u32(&mut r)? as usize;
        if n_hidden > 1024 {
            return Err(Error::Format(format!("implausible hidden layer count {n_hidden}")));
        }
        let hidden = (0..n_hidden)
            .map(|_| read_u32(&mut r).map(|h| h as usize))
            .collect::<Result<Vec<_>>>()?;
        let num_classes = read_u32(&mut r)? as usize;
        let dims = ModelDims::new(input_dim, hidden, num_classes)?;
        let mut params = ModelParams::zeros(dims)?;
        for buf in params.buffers_mut() {
            for v in buf.iter_mut() {
                *v = f64::from_bits(read_u64(&mut r)?);
            }
        }
        if !r.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes", r.len())));
        }
        Ok(Checkpoint {
            seed,
            epoch,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Format("checkpoint truncated".into()))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}
