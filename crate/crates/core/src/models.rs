//! The two classifier families: a ResNet-18 with a CIFAR-style stem and a
//! plain batch-normalised MLP. Both expose the penultimate features feeding
//! the final affine layer.
//!
//! Parameters are created from a seeded ChaCha stream, so equal seeds give
//! bit-identical initial weights. Names follow the usual PyTorch layout
//! (`conv1.weight`, `layer2.0.bn1.running_mean`, `fc.bias`, ...); linear
//! weights are the exception in shape, stored (in, out).

use candle_core::{DType, Device, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::datasets::PLANE;
use crate::error::{Error, Result};
use crate::util::sha256_hex;

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Name prefix of the final affine layer.
pub const HEAD: &str = "fc";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelFamily {
    #[serde(rename = "resnet18")]
    Resnet18Variant,
    #[serde(rename = "mlp10")]
    Mlp10,
}

fn default_width() -> usize {
    1024
}

fn default_depth() -> usize {
    10
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub family: ModelFamily,
    pub in_channels: usize,
    pub num_classes: usize,
    /// Hidden width (MLP only).
    #[serde(default = "default_width")]
    pub width: usize,
    /// Number of hidden blocks (MLP only).
    #[serde(default = "default_depth")]
    pub depth: usize,
}

impl ModelSpec {
    pub fn resnet18(in_channels: usize, num_classes: usize) -> Self {
        ModelSpec {
            family: ModelFamily::Resnet18Variant,
            in_channels,
            num_classes,
            width: default_width(),
            depth: default_depth(),
        }
    }

    pub fn mlp10(in_channels: usize, num_classes: usize) -> Self {
        ModelSpec {
            family: ModelFamily::Mlp10,
            in_channels,
            num_classes,
            width: default_width(),
            depth: default_depth(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::spec("in_channels must be at least 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::spec("num_classes must be at least 2"));
        }
        if self.family == ModelFamily::Mlp10 && (self.width == 0 || self.depth == 0) {
            return Err(Error::spec("MLP width and depth must be positive"));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        match self.family {
            ModelFamily::Resnet18Variant => 512,
            ModelFamily::Mlp10 => self.width,
        }
    }
}

/// Deterministic parameter initialiser.
struct Init {
    rng: ChaCha8Rng,
    device: Device,
    dtype: DType,
}

impl Init {
    fn tensor(&self, vals: Vec<f64>, shape: &[usize]) -> Result<Var> {
        let t = Tensor::from_vec(vals, shape, &self.device)?.to_dtype(self.dtype)?;
        Ok(Var::from_tensor(&t)?)
    }

    fn uniform(&mut self, shape: &[usize], bound: f64) -> Result<Var> {
        let n = shape.iter().product();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let vals = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.tensor(vals, shape)
    }

    fn normal(&mut self, shape: &[usize], std: f64) -> Result<Var> {
        let n = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("finite std");
        let vals = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.tensor(vals, shape)
    }

    fn constant(&self, shape: &[usize], v: f64) -> Result<Var> {
        self.tensor(vec![v; shape.iter().product()], shape)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Slot {
    Param,
    Buffer,
}

#[derive(Default)]
struct Registry {
    entries: Vec<(String, Var, Slot)>,
}

impl Registry {
    fn add(&mut self, name: String, var: &Var, slot: Slot) {
        self.entries.push((name, var.clone(), slot));
    }
}

struct Linear {
    weight: Var,
    bias: Var,
}

impl Linear {
    fn new(init: &mut Init, reg: &mut Registry, name: &str, inp: usize, out: usize) -> Result<Self> {
        let bound = 1.0 / (inp as f64).sqrt();
        // drawn (out, in) like the usual layout, stored (in, out): a forward
        // product against a transposed view makes the backward pass slower
        let drawn = init.uniform(&[out, inp], bound)?;
        let weight = Var::from_tensor(&drawn.t()?.contiguous()?)?;
        let bias = init.uniform(&[out], bound)?;
        reg.add(format!("{name}.weight"), &weight, Slot::Param);
        reg.add(format!("{name}.bias"), &bias, Slot::Param);
        Ok(Linear { weight, bias })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

struct BatchNorm {
    weight: Var,
    bias: Var,
    running_mean: Var,
    running_var: Var,
}

impl BatchNorm {
    fn new(init: &mut Init, reg: &mut Registry, name: &str, n: usize) -> Result<Self> {
        let bn = BatchNorm {
            weight: init.constant(&[n], 1.0)?,
            bias: init.constant(&[n], 0.0)?,
            running_mean: init.constant(&[n], 0.0)?,
            running_var: init.constant(&[n], 1.0)?,
        };
        reg.add(format!("{name}.weight"), &bn.weight, Slot::Param);
        reg.add(format!("{name}.bias"), &bn.bias, Slot::Param);
        reg.add(format!("{name}.running_mean"), &bn.running_mean, Slot::Buffer);
        reg.add(format!("{name}.running_var"), &bn.running_var, Slot::Buffer);
        Ok(bn)
    }

    /// Normalises over the batch (and spatial) axes; input is (B, F) or (B, C, H, W).
    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let c = x.dim(1)?;
        let (shape, reduce): (Vec<usize>, Vec<usize>) = match x.rank() {
            2 => (vec![1, c], vec![0]),
            4 => (vec![1, c, 1, 1], vec![0, 2, 3]),
            r => return Err(Error::spec(format!("batch norm on rank-{r} input"))),
        };
        let (mean, var) = if train {
            let mean = x.mean_keepdim(reduce.as_slice())?;
            let centered = x.broadcast_sub(&mean)?;
            let var = centered.sqr()?.mean_keepdim(reduce.as_slice())?;
            let n: usize = reduce.iter().map(|&d| x.dim(d).unwrap()).product();
            let unbias = if n > 1 { n as f64 / (n - 1) as f64 } else { 1.0 };
            let m = mean.detach().flatten_all()?;
            let v = var.detach().flatten_all()?.affine(unbias, 0.0)?;
            self.running_mean.set(
                &self
                    .running_mean
                    .affine(1.0 - BN_MOMENTUM, 0.0)?
                    .add(&m.affine(BN_MOMENTUM, 0.0)?)?,
            )?;
            self.running_var.set(
                &self
                    .running_var
                    .affine(1.0 - BN_MOMENTUM, 0.0)?
                    .add(&v.affine(BN_MOMENTUM, 0.0)?)?,
            )?;
            (mean, var)
        } else {
            (
                self.running_mean.as_tensor().reshape(shape.as_slice())?,
                self.running_var.as_tensor().reshape(shape.as_slice())?,
            )
        };
        let xhat = x
            .broadcast_sub(&mean)?
            .broadcast_div(&var.affine(1.0, BN_EPS)?.sqrt()?)?;
        Ok(xhat
            .broadcast_mul(&self.weight.reshape(shape.as_slice())?)?
            .broadcast_add(&self.bias.reshape(shape.as_slice())?)?)
    }
}

struct Conv {
    weight: Var,
    stride: usize,
    padding: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    fn new(
        init: &mut Init,
        reg: &mut Registry,
        name: &str,
        inp: usize,
        out: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        // Kaiming normal, fan-out, ReLU gain.
        let std = (2.0 / (out * k * k) as f64).sqrt();
        let weight = init.normal(&[out, inp, k, k], std)?;
        reg.add(format!("{name}.weight"), &weight, Slot::Param);
        Ok(Conv {
            weight,
            stride,
            padding,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?)
    }
}

struct BasicBlock {
    conv1: Conv,
    bn1: BatchNorm,
    conv2: Conv,
    bn2: BatchNorm,
    shortcut: Option<(Conv, BatchNorm)>,
}

impl BasicBlock {
    fn new(
        init: &mut Init,
        reg: &mut Registry,
        name: &str,
        inp: usize,
        out: usize,
        stride: usize,
    ) -> Result<Self> {
        let conv1 = Conv::new(init, reg, &format!("{name}.conv1"), inp, out, 3, stride, 1)?;
        let bn1 = BatchNorm::new(init, reg, &format!("{name}.bn1"), out)?;
        let conv2 = Conv::new(init, reg, &format!("{name}.conv2"), out, out, 3, 1, 1)?;
        let bn2 = BatchNorm::new(init, reg, &format!("{name}.bn2"), out)?;
        let shortcut = if stride != 1 || inp != out {
            let c = Conv::new(init, reg, &format!("{name}.shortcut.0"), inp, out, 1, stride, 0)?;
            let b = BatchNorm::new(init, reg, &format!("{name}.shortcut.1"), out)?;
            Some((c, b))
        } else {
            None
        };
        Ok(BasicBlock {
            conv1,
            bn1,
            conv2,
            bn2,
            shortcut,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let h = self.bn1.forward(&self.conv1.forward(x)?, train)?.relu()?;
        let h = self.bn2.forward(&self.conv2.forward(&h)?, train)?;
        let skip = match &self.shortcut {
            Some((c, b)) => b.forward(&c.forward(x)?, train)?,
            None => x.clone(),
        };
        Ok((h + skip)?.relu()?)
    }
}

enum Body {
    Mlp(Vec<(Linear, BatchNorm)>),
    Resnet {
        conv1: Conv,
        bn1: BatchNorm,
        blocks: Vec<BasicBlock>,
    },
}

/// A trainable classifier mapping (B, C, 32, 32) inputs to class scores.
pub struct Model {
    spec: ModelSpec,
    body: Body,
    head: Linear,
    registry: Registry,
    device: Device,
    dtype: DType,
}

/// Builds an f32 CPU model with weights drawn from `seed`.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<Model> {
    build_model_on(spec, seed, DType::F32, &Device::Cpu)
}

pub fn build_model_on(spec: &ModelSpec, seed: u64, dtype: DType, device: &Device) -> Result<Model> {
    spec.validate()?;
    let mut init = Init {
        rng: ChaCha8Rng::seed_from_u64(seed),
        device: device.clone(),
        dtype,
    };
    let mut reg = Registry::default();
    let body = match spec.family {
        ModelFamily::Mlp10 => {
            let mut blocks = Vec::with_capacity(spec.depth);
            let mut inp = spec.in_channels * PLANE;
            for i in 0..spec.depth {
                let lin = Linear::new(
                    &mut init,
                    &mut reg,
                    &format!("blocks.{i}.linear"),
                    inp,
                    spec.width,
                )?;
                let bn = BatchNorm::new(&mut init, &mut reg, &format!("blocks.{i}.bn"), spec.width)?;
                blocks.push((lin, bn));
                inp = spec.width;
            }
            Body::Mlp(blocks)
        }
        ModelFamily::Resnet18Variant => {
            let conv1 = Conv::new(&mut init, &mut reg, "conv1", spec.in_channels, 64, 3, 1, 1)?;
            let bn1 = BatchNorm::new(&mut init, &mut reg, "bn1", 64)?;
            let mut blocks = Vec::with_capacity(8);
            let mut inp = 64;
            for (layer, (out, stride)) in [(64, 1), (128, 2), (256, 2), (512, 2)]
                .into_iter()
                .enumerate()
            {
                for b in 0..2 {
                    let s = if b == 0 { stride } else { 1 };
                    let name = format!("layer{}.{b}", layer + 1);
                    blocks.push(BasicBlock::new(&mut init, &mut reg, &name, inp, out, s)?);
                    inp = out;
                }
            }
            Body::Resnet { conv1, bn1, blocks }
        }
    };
    let head = Linear::new(&mut init, &mut reg, HEAD, spec.feature_dim(), spec.num_classes)?;
    Ok(Model {
        spec: spec.clone(),
        body,
        head,
        registry: reg,
        device: device.clone(),
        dtype,
    })
}

impl Model {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let dims = x.dims();
        if dims.len() != 4 || dims[1] != self.spec.in_channels || dims[2] != 32 || dims[3] != 32 {
            return Err(Error::spec(format!(
                "input of shape {dims:?} does not match (B, {}, 32, 32)",
                self.spec.in_channels
            )));
        }
        Ok(())
    }

    /// Activations feeding the final affine layer, shape (B, feature_dim).
    pub fn features(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        self.check_input(x)?;
        match &self.body {
            Body::Mlp(blocks) => {
                let mut h = x.flatten_from(1)?;
                for (lin, bn) in blocks {
                    h = bn.forward(&lin.forward(&h)?, train)?.relu()?;
                }
                Ok(h)
            }
            Body::Resnet { conv1, bn1, blocks } => {
                let mut h = bn1.forward(&conv1.forward(x)?, train)?.relu()?;
                for b in blocks {
                    h = b.forward(&h, train)?;
                }
                Ok(h.mean((2, 3))?)
            }
        }
    }

    /// Final affine map applied to features.
    pub fn head_forward(&self, features: &Tensor) -> Result<Tensor> {
        self.head.forward(features)
    }

    /// Class scores, shape (B, num_classes).
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        self.head_forward(&self.features(x, train)?)
    }

    /// Trainable parameters in creation order.
    pub fn parameters(&self) -> Vec<(&str, &Var)> {
        self.registry
            .entries
            .iter()
            .filter(|e| e.2 == Slot::Param)
            .map(|e| (e.0.as_str(), &e.1))
            .collect()
    }

    /// Parameters and batch-norm running statistics.
    pub fn state(&self) -> Vec<(&str, &Var)> {
        self.registry
            .entries
            .iter()
            .map(|e| (e.0.as_str(), &e.1))
            .collect()
    }

    /// The final layer's weight, stored (feature_dim × num_classes).
    pub fn head_weight(&self) -> &Var {
        &self.head.weight
    }

    pub fn head_bias(&self) -> &Var {
        &self.head.bias
    }

    /// Replaces the final layer's weight (num_classes × feature_dim) and bias.
    pub fn set_head(&self, weight: &Tensor, bias: &Tensor) -> Result<()> {
        let want = (self.spec.num_classes, self.spec.feature_dim());
        if weight.dims2()? != want || bias.dims1()? != want.0 {
            return Err(Error::spec("head shape mismatch"));
        }
        self.head.weight.set(&weight.to_dtype(self.dtype)?.t()?.contiguous()?)?;
        self.head.bias.set(&bias.to_dtype(self.dtype)?)?;
        Ok(())
    }

    /// Copies a named state into this model; every entry must be present.
    pub fn load_state(&self, tensors: &std::collections::HashMap<String, Tensor>) -> Result<()> {
        for (name, var) in self.state() {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::data(format!("checkpoint lacks tensor {name}")))?;
            if t.dims() != var.dims() {
                return Err(Error::data(format!(
                    "tensor {name}: shape {:?} in checkpoint, {:?} in model",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        }
        Ok(())
    }

    /// SHA-256 over the named state entries accepted by `filter`.
    pub fn state_hash(&self, filter: impl Fn(&str) -> bool) -> Result<String> {
        let mut bytes = Vec::new();
        for (name, var) in self.state() {
            if !filter(name) {
                continue;
            }
            bytes.extend(name.as_bytes());
            let vals: Vec<f64> = var
                .as_tensor()
                .flatten_all()?
                .to_dtype(DType::F64)?
                .to_vec1()?;
            for v in vals {
                bytes.extend(v.to_le_bytes());
            }
        }
        Ok(sha256_hex(&bytes))
    }

    pub fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|(_, v)| v.elem_count()).sum()
    }
}

/// Penultimate features in evaluation mode.
pub fn extract_features(model: &Model, batch: &Tensor) -> Result<Tensor> {
    model.features(batch, false)
}

/// Index of the largest score per row.
pub fn argmax_rows(scores: &Tensor) -> Result<Vec<u32>> {
    Ok(scores.argmax(D::Minus1)?.to_vec1::<u32>()?)
}
