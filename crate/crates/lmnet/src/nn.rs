//! Layer parameter bundles and the multi-branch module forward.
//!
//! All forwards are generic over [`Cx`], so the same code runs on the
//! autodiff tape, in plain eval, and under the cost counter.

use std::sync::{Arc, RwLock};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Cx, Param};
use crate::error::Result;
use crate::ops::Conv2dSpec;
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A serializable piece of model state: learnable parameter or buffer.
#[derive(Clone)]
pub enum Slot<T: Element> {
    Param(Param<T>),
    Buffer(String, Arc<RwLock<Tensor<T>>>),
}

impl<T: Element> Slot<T> {
    pub fn name(&self) -> &str {
        match self {
            Slot::Param(p) => p.name(),
            Slot::Buffer(n, _) => n,
        }
    }

    pub fn get(&self) -> Tensor<T> {
        match self {
            Slot::Param(p) => p.get(),
            Slot::Buffer(_, b) => b.read().unwrap().clone(),
        }
    }

    pub fn set(&self, t: Tensor<T>) {
        match self {
            Slot::Param(p) => p.set(t),
            Slot::Buffer(_, b) => *b.write().unwrap() = t,
        }
    }
}

/// Deterministic weight initializer (ChaCha-seeded, Box-Muller normals).
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(rng: ChaCha8Rng) -> Self {
        Self { rng }
    }

    fn normal(&mut self, std: f64) -> f64 {
        let u1: f64 = self.rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = self.rng.gen_range(0.0..1.0);
        std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// He-normal conv kernel [D, C/g, kh, kw].
    pub fn conv<T: Element>(&mut self, shape: Vec<usize>) -> Tensor<T> {
        let fan_in: usize = shape[1..].iter().product();
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| self.normal(std)).collect();
        Tensor::from_f64_slice(shape, &data).unwrap()
    }

    /// Xavier-uniform linear weight [in, out].
    pub fn linear<T: Element>(&mut self, fan_in: usize, fan_out: usize) -> Tensor<T> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n = fan_in * fan_out;
        let data: Vec<f64> = (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect();
        Tensor::from_f64_slice(vec![fan_in, fan_out], &data).unwrap()
    }
}

/// Batch normalization parameters and running statistics.
#[derive(Clone)]
pub struct BnParams<T: Element> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Arc<RwLock<Tensor<T>>>,
    pub running_var: Arc<RwLock<Tensor<T>>>,
    pub eps: f64,
    pub momentum: f64,
    name: String,
}

impl<T: Element> BnParams<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Param::new(format!("{name}.gamma"), Tensor::ones(vec![channels]).unwrap(), false),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros(vec![channels]).unwrap(), false),
            running_mean: Arc::new(RwLock::new(Tensor::zeros(vec![channels]).unwrap())),
            running_var: Arc::new(RwLock::new(Tensor::ones(vec![channels]).unwrap())),
            eps: 1e-5,
            momentum: 0.1,
            name: name.to_string(),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.get().numel()
    }

    pub fn forward<C: Cx<T>>(&self, cx: &C, x: &C::V, mode: Mode) -> Result<C::V> {
        let gamma = cx.param(&self.gamma)?;
        let beta = cx.param(&self.beta)?;
        match mode {
            Mode::Eval => {
                let mean = self.running_mean.read().unwrap().clone();
                let var = self.running_var.read().unwrap().clone();
                cx.batch_norm_eval(x, &gamma, &beta, &mean, &var, self.eps)
            }
            Mode::Train => {
                let (y, mean, var) = cx.batch_norm_train(x, &gamma, &beta, self.eps)?;
                let m = T::from_f64(self.momentum);
                let keep = T::one() - m;
                {
                    let mut rm = self.running_mean.write().unwrap();
                    *rm = rm.scale(keep).add(&mean.scale(m))?;
                    let mut rv = self.running_var.write().unwrap();
                    *rv = rv.scale(keep).add(&var.scale(m))?;
                }
                Ok(y)
            }
        }
    }

    pub fn slots(&self, out: &mut Vec<Slot<T>>) {
        out.push(Slot::Param(self.gamma.clone()));
        out.push(Slot::Param(self.beta.clone()));
        out.push(Slot::Buffer(format!("{}.running_mean", self.name), self.running_mean.clone()));
        out.push(Slot::Buffer(format!("{}.running_var", self.name), self.running_var.clone()));
    }
}

/// Plain convolution layer with optional bias.
#[derive(Clone)]
pub struct Conv2d<T: Element> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub spec: Conv2dSpec,
}

impl<T: Element> Conv2d<T> {
    pub fn new(
        name: &str,
        init: &mut Initializer,
        out_ch: usize,
        in_ch: usize,
        (kh, kw): (usize, usize),
        spec: Conv2dSpec,
        bias: bool,
    ) -> Self {
        let weight = Param::new(
            format!("{name}.weight"),
            init.conv(vec![out_ch, in_ch / spec.groups, kh, kw]),
            true,
        );
        let bias = bias.then(|| {
            Param::new(format!("{name}.bias"), Tensor::zeros(vec![out_ch]).unwrap(), false)
        });
        Self { weight, bias, spec }
    }

    pub fn forward<C: Cx<T>>(&self, cx: &C, x: &C::V) -> Result<C::V> {
        let w = cx.param(&self.weight)?;
        let b = self.bias.as_ref().map(|p| cx.param(p)).transpose()?;
        cx.conv2d(x, &w, b.as_ref(), self.spec)
    }

    pub fn slots(&self, out: &mut Vec<Slot<T>>) {
        out.push(Slot::Param(self.weight.clone()));
        if let Some(b) = &self.bias {
            out.push(Slot::Param(b.clone()));
        }
    }
}

/// Bias-free convolution followed by batch normalization.
#[derive(Clone)]
pub struct ConvBn<T: Element> {
    pub conv: Conv2d<T>,
    pub bn: BnParams<T>,
}

impl<T: Element> ConvBn<T> {
    pub fn new(
        name: &str,
        init: &mut Initializer,
        out_ch: usize,
        in_ch: usize,
        kernel: (usize, usize),
        spec: Conv2dSpec,
    ) -> Self {
        Self {
            conv: Conv2d::new(name, init, out_ch, in_ch, kernel, spec, false),
            bn: BnParams::new(&format!("{name}.bn"), out_ch),
        }
    }

    pub fn forward<C: Cx<T>>(&self, cx: &C, x: &C::V, mode: Mode) -> Result<C::V> {
        let y = self.conv.forward(cx, x)?;
        self.bn.forward(cx, &y, mode)
    }

    pub fn slots(&self, out: &mut Vec<Slot<T>>) {
        self.conv.slots(out);
        self.bn.slots(out);
    }
}

/// One depthwise branch of the multi-branch module: bias-free conv + BN.
/// Per-axis padding is (k-1)/2, so all branch outputs share spatial extents.
#[derive(Clone)]
pub struct BranchSpec<T: Element> {
    pub conv: Conv2d<T>,
    pub bn: BnParams<T>,
    pub kernel: (usize, usize),
}

impl<T: Element> BranchSpec<T> {
    pub fn new(
        name: &str,
        init: &mut Initializer,
        channels: usize,
        kernel: (usize, usize),
    ) -> Self {
        let spec = Conv2dSpec {
            stride: (1, 1),
            padding: ((kernel.0 - 1) / 2, (kernel.1 - 1) / 2),
            groups: channels,
        };
        Self {
            conv: Conv2d::new(name, init, channels, channels, kernel, spec, false),
            bn: BnParams::new(&format!("{name}.bn"), channels),
            kernel,
        }
    }

    pub fn forward<C: Cx<T>>(&self, cx: &C, x: &C::V, mode: Mode) -> Result<C::V> {
        let y = self.conv.forward(cx, x)?;
        self.bn.forward(cx, &y, mode)
    }

    pub fn slots(&self, out: &mut Vec<Slot<T>>) {
        self.conv.slots(out);
        self.bn.slots(out);
    }
}

/// Inference-time replacement for a set of parallel branches: a single
/// convolution with bias, kernel extent = per-axis max over the branches.
#[derive(Clone)]
pub struct FusedConv<T: Element> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub spec: Conv2dSpec,
}

impl<T: Element> FusedConv<T> {
    pub fn forward<C: Cx<T>>(&self, cx: &C, x: &C::V) -> Result<C::V> {
        let w = cx.param(&self.weight)?;
        let b = cx.param(&self.bias)?;
        cx.conv2d(x, &w, Some(&b), self.spec)
    }

    pub fn slots(&self, out: &mut Vec<Slot<T>>) {
        out.push(Slot::Param(self.weight.clone()));
        out.push(Slot::Param(self.bias.clone()));
    }
}

#[derive(Clone)]
pub enum BranchState<T: Element> {
    Train(Vec<BranchSpec<T>>),
    Fused(FusedConv<T>),
}

/// Squeeze-and-Excitation gate: sigmoid(W2 relu(W1 gap(x))), bias-free.
#[derive(Clone)]
pub struct SeParams<T: Element> {
    pub w1: Param<T>,
    pub w2: Param<T>,
    pub channels: usize,
    pub reduction: usize,
}

impl<T: Element> SeParams<T> {
    pub fn new(name: &str, init: &mut Initializer, channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(crate::Error::InvalidArgument(format!(
                "SE channels {} not divisible by reduction {}",
                channels, reduction
            )));
        }
        let hidden = channels / reduction;
        Ok(Self {
            w1: Param::new(format!("{name}.w1"), init.linear(channels, hidden), true),
            w2: Param::new(format!("{name}.w2"), init.linear(hidden, channels), true),
            channels,
            reduction,
        })
    }

    pub fn forward<C: Cx<T>>(&self, cx: &C, x: &C::V) -> Result<C::V> {
        let shape = cx.shape_of(x);
        let (n, c) = (shape[0], shape[1]);
        let pooled = cx.global_avg_pool(x)?;
        let flat = cx.reshape(&pooled, vec![n, c])?;
        let w1 = cx.param(&self.w1)?;
        let w2 = cx.param(&self.w2)?;
        let hidden = cx.relu(&cx.matmul(&flat, &w1)?)?;
        let gate = cx.sigmoid(&cx.matmul(&hidden, &w2)?)?;
        let gate = cx.reshape(&gate, vec![n, c, 1, 1])?;
        cx.mul_channel(x, &gate)
    }

    pub fn slots(&self, out: &mut Vec<Slot<T>>) {
        out.push(Slot::Param(self.w1.clone()));
        out.push(Slot::Param(self.w2.clone()));
    }
}

/// The multi-branch module: 1x1 expansion, parallel depthwise branches with
/// BN, SE gate, 1x1 projection, and a 1x1 shortcut convolution.
///
/// `y = project(se(relu(sum_i bn_i(dwconv_i(relu(expand(x))))))) + shortcut(x)`
#[derive(Clone)]
pub struct MultiBranchModule<T: Element> {
    pub expand: ConvBn<T>,
    pub branches: BranchState<T>,
    pub se: SeParams<T>,
    pub project: ConvBn<T>,
    pub shortcut: ConvBn<T>,
    pub in_ch: usize,
    pub mid_ch: usize,
    pub out_ch: usize,
}

impl<T: Element> MultiBranchModule<T> {
    pub fn new(
        name: &str,
        init: &mut Initializer,
        in_ch: usize,
        out_ch: usize,
        expansion: usize,
        se_reduction: usize,
        kernels: &[(usize, usize)],
    ) -> Result<Self> {
        let mid = in_ch * expansion;
        let branches = kernels
            .iter()
            .enumerate()
            .map(|(i, &k)| BranchSpec::new(&format!("{name}.branch{i}"), init, mid, k))
            .collect();
        Ok(Self {
            expand: ConvBn::new(&format!("{name}.expand"), init, mid, in_ch, (1, 1), Conv2dSpec::unit()),
            branches: BranchState::Train(branches),
            se: SeParams::new(&format!("{name}.se"), init, mid, se_reduction)?,
            project: ConvBn::new(&format!("{name}.project"), init, out_ch, mid, (1, 1), Conv2dSpec::unit()),
            shortcut: ConvBn::new(&format!("{name}.shortcut"), init, out_ch, in_ch, (1, 1), Conv2dSpec::unit()),
            in_ch,
            mid_ch: mid,
            out_ch,
        })
    }

    pub fn forward<C: Cx<T>>(&self, cx: &C, x: &C::V, mode: Mode) -> Result<C::V> {
        let expanded = cx.relu(&self.expand.forward(cx, x, mode)?)?;
        let summed = match &self.branches {
            BranchState::Train(branches) => {
                let mut acc: Option<C::V> = None;
                for b in branches {
                    let y = b.forward(cx, &expanded, mode)?;
                    acc = Some(match acc {
                        Some(a) => cx.add(&a, &y)?,
                        None => y,
                    });
                }
                acc.ok_or_else(|| {
                    crate::Error::InvalidArgument("multi-branch module with zero branches".into())
                })?
            }
            BranchState::Fused(fc) => fc.forward(cx, &expanded)?,
        };
        let activated = cx.relu(&summed)?;
        let gated = self.se.forward(cx, &activated)?;
        let projected = self.project.forward(cx, &gated, mode)?;
        let shortcut = self.shortcut.forward(cx, x, mode)?;
        cx.add(&projected, &shortcut)
    }

    pub fn is_fused(&self) -> bool {
        matches!(self.branches, BranchState::Fused(_))
    }

    pub fn slots(&self, out: &mut Vec<Slot<T>>) {
        self.expand.slots(out);
        match &self.branches {
            BranchState::Train(bs) => {
                for b in bs {
                    b.slots(out);
                }
            }
            BranchState::Fused(fc) => fc.slots(out),
        }
        self.se.slots(out);
        self.project.slots(out);
        self.shortcut.slots(out);
    }
}
