//! Structural re-parameterization: fold batch norm into the preceding
//! convolution, center-pad heterogeneous kernels to a common extent, and
//! merge parallel branches into one convolution. Also hosts the shape-only
//! cost counter used to compare train-time and fused networks.
//!
//! Folding uses `K' = (gamma / sqrt(var + eps)) K` per output channel and
//! `b = beta - mu * gamma / sqrt(var + eps)`; summing the folded kernels and
//! biases of same-stride parallel branches is exact because convolution is
//! linear in the kernel.

use std::cell::Cell;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Cx, Param};
use crate::error::{Error, Result};
use crate::nn::{BnParams, BranchSpec, BranchState, FusedConv, MultiBranchModule, Slot};
use crate::ops::{conv2d_out_shape, Conv2dSpec};
use crate::tensor::{Element, Tensor};

/// Fold a batch norm (eval statistics) into the preceding convolution.
/// Returns the scaled kernel and the new per-channel bias.
pub fn fuse_conv_bn<T: Element>(
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    bn_gamma: &Tensor<T>,
    bn_beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let d = weight.dim(0);
    for (name, t) in [
        ("gamma", bn_gamma),
        ("beta", bn_beta),
        ("running_mean", running_mean),
        ("running_var", running_var),
    ] {
        if t.numel() != d {
            return Err(Error::ShapeMismatch(format!(
                "bn {} has {} entries for {} output channels",
                name,
                t.numel(),
                d
            )));
        }
    }
    let per_ch = weight.numel() / d;
    let mut w = weight.to_vec();
    let mut b = vec![T::zero(); d];
    for ch in 0..d {
        let gamma = bn_gamma.data()[ch].to_f64();
        let mean = running_mean.data()[ch].to_f64();
        let var = running_var.data()[ch].to_f64();
        let scale = gamma / (var + eps).sqrt();
        for v in &mut w[ch * per_ch..(ch + 1) * per_ch] {
            *v = T::from_f64(v.to_f64() * scale);
        }
        let b0 = bias.map(|t| t.data()[ch].to_f64()).unwrap_or(0.0);
        b[ch] = T::from_f64((b0 - mean) * scale + bn_beta.data()[ch].to_f64());
    }
    Ok((Tensor::new(weight.shape().to_vec(), w)?, Tensor::new(vec![d], b)?))
}

/// Center-pad a kernel `[D, C, kh, kw]` with zeros to `(th, tw)`. The extent
/// difference must be even on each axis so the kernel center is preserved.
pub fn pad_kernel_center<T: Element>(
    w: &Tensor<T>,
    (th, tw): (usize, usize),
) -> Result<Tensor<T>> {
    if w.rank() != 4 {
        return Err(Error::ShapeMismatch(format!("kernel must be rank 4, got {:?}", w.shape())));
    }
    let (d, c, kh, kw) = (w.dim(0), w.dim(1), w.dim(2), w.dim(3));
    if th < kh || tw < kw || (th - kh) % 2 != 0 || (tw - kw) % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "cannot center-pad a {}x{} kernel to {}x{}",
            kh, kw, th, tw
        )));
    }
    let (oh, ow) = ((th - kh) / 2, (tw - kw) / 2);
    let mut out = vec![T::zero(); d * c * th * tw];
    let src = w.data();
    for dc in 0..d * c {
        for i in 0..kh {
            for j in 0..kw {
                out[dc * th * tw + (i + oh) * tw + (j + ow)] = src[dc * kh * kw + i * kw + j];
            }
        }
    }
    Tensor::new(vec![d, c, th, tw], out)
}

/// Merge same-stride parallel convolutions (kernel, bias) into one by
/// center-padding every kernel to the per-axis maximum extent and summing.
pub fn merge_branches<T: Element>(
    branches: &[(Tensor<T>, Tensor<T>)],
) -> Result<(Tensor<T>, Tensor<T>)> {
    if branches.is_empty() {
        return Err(Error::InvalidArgument("no branches to merge".into()));
    }
    let th = branches.iter().map(|(w, _)| w.dim(2)).max().unwrap();
    let tw = branches.iter().map(|(w, _)| w.dim(3)).max().unwrap();
    let mut weight: Option<Tensor<T>> = None;
    let mut bias: Option<Tensor<T>> = None;
    for (w, b) in branches {
        let padded = pad_kernel_center(w, (th, tw))?;
        weight = Some(match weight {
            Some(acc) => acc.add(&padded)?,
            None => padded,
        });
        bias = Some(match bias {
            Some(acc) => acc.add(b)?,
            None => b.clone(),
        });
    }
    Ok((weight.unwrap(), bias.unwrap()))
}

/// Fold the BN of each depthwise branch into its convolution and merge the
/// results into a single convolution.
pub fn fuse_branch_specs<T: Element>(
    name: &str,
    branches: &[BranchSpec<T>],
) -> Result<FusedConv<T>> {
    let mut folded = Vec::with_capacity(branches.len());
    let mut groups = None;
    for b in branches {
        if b.conv.spec.stride != (1, 1) {
            return Err(Error::InvalidArgument(
                "branch fusion requires stride-1 branches".into(),
            ));
        }
        match groups {
            None => groups = Some(b.conv.spec.groups),
            Some(g) if g != b.conv.spec.groups => {
                return Err(Error::InvalidArgument(
                    "branches disagree on convolution groups".into(),
                ))
            }
            _ => {}
        }
        folded.push(fuse_conv_bn(
            &b.conv.weight.get(),
            None,
            &b.bn.gamma.get(),
            &b.bn.beta.get(),
            &b.bn.running_mean.read().unwrap(),
            &b.bn.running_var.read().unwrap(),
            b.bn.eps,
        )?);
    }
    let (weight, bias) = merge_branches(&folded)?;
    let (kh, kw) = (weight.dim(2), weight.dim(3));
    let spec = Conv2dSpec {
        stride: (1, 1),
        padding: ((kh - 1) / 2, (kw - 1) / 2),
        groups: groups.unwrap(),
    };
    Ok(FusedConv {
        weight: Param::new(format!("{name}.weight"), weight, true),
        bias: Param::new(format!("{name}.bias"), bias, false),
        spec,
    })
}

/// Replace the parallel branches of a multi-branch module with the single
/// merged convolution. Errors if the module is already fused.
pub fn fuse_multi_branch<T: Element>(
    name: &str,
    module: &mut MultiBranchModule<T>,
) -> Result<()> {
    let fused = match &module.branches {
        BranchState::Fused(_) => {
            return Err(Error::InvalidArgument(format!(
                "module {} is already fused",
                name
            )))
        }
        BranchState::Train(branches) => fuse_branch_specs(&format!("{name}.fused"), branches)?,
    };
    module.branches = BranchState::Fused(fused);
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlopsUnit {
    /// Multiply-accumulate operations.
    Macs,
    /// 2x MACs: multiplies and adds counted separately.
    Flops2x,
}

impl FlopsUnit {
    pub fn apply(self, macs: u128) -> u128 {
        match self {
            FlopsUnit::Macs => macs,
            FlopsUnit::Flops2x => 2 * macs,
        }
    }
}

/// Shape-only execution context. Values are shapes; convolutions and matrix
/// products accumulate multiply-accumulate counts, everything else is free.
pub struct CostCx {
    macs: Cell<u128>,
}

impl CostCx {
    pub fn new() -> Self {
        Self { macs: Cell::new(0) }
    }

    pub fn macs(&self) -> u128 {
        self.macs.get()
    }

    fn charge(&self, n: u128) {
        self.macs.set(self.macs.get() + n);
    }
}

impl Default for CostCx {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Cx<T> for CostCx {
    type V = Vec<usize>;

    fn constant(&self, t: Tensor<T>) -> Result<Vec<usize>> {
        Ok(t.shape().to_vec())
    }
    fn param(&self, p: &Param<T>) -> Result<Vec<usize>> {
        Ok(p.get().shape().to_vec())
    }
    fn shape_of(&self, v: &Vec<usize>) -> Vec<usize> {
        v.clone()
    }
    fn add(&self, a: &Vec<usize>, b: &Vec<usize>) -> Result<Vec<usize>> {
        if a != b {
            return Err(Error::ShapeMismatch(format!("add {:?} vs {:?}", a, b)));
        }
        Ok(a.clone())
    }
    fn sub(&self, a: &Vec<usize>, b: &Vec<usize>) -> Result<Vec<usize>> {
        <CostCx as Cx<T>>::add(self, a, b)
    }
    fn mul(&self, a: &Vec<usize>, b: &Vec<usize>) -> Result<Vec<usize>> {
        <CostCx as Cx<T>>::add(self, a, b)
    }
    fn div(&self, a: &Vec<usize>, b: &Vec<usize>) -> Result<Vec<usize>> {
        <CostCx as Cx<T>>::add(self, a, b)
    }
    fn relu(&self, a: &Vec<usize>) -> Result<Vec<usize>> {
        Ok(a.clone())
    }
    fn sigmoid(&self, a: &Vec<usize>) -> Result<Vec<usize>> {
        Ok(a.clone())
    }
    fn gelu(&self, a: &Vec<usize>) -> Result<Vec<usize>> {
        Ok(a.clone())
    }
    fn exp(&self, a: &Vec<usize>) -> Result<Vec<usize>> {
        Ok(a.clone())
    }
    fn ln(&self, a: &Vec<usize>) -> Result<Vec<usize>> {
        Ok(a.clone())
    }
    fn scale(&self, a: &Vec<usize>, _s: f64) -> Result<Vec<usize>> {
        Ok(a.clone())
    }
    fn add_scalar(&self, a: &Vec<usize>, _s: f64) -> Result<Vec<usize>> {
        Ok(a.clone())
    }
    fn matmul(&self, a: &Vec<usize>, b: &Vec<usize>) -> Result<Vec<usize>> {
        if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
            return Err(Error::ShapeMismatch(format!("matmul {:?} x {:?}", a, b)));
        }
        self.charge(a[0] as u128 * a[1] as u128 * b[1] as u128);
        Ok(vec![a[0], b[1]])
    }
    fn bmm(&self, a: &Vec<usize>, b: &Vec<usize>) -> Result<Vec<usize>> {
        if a.len() < 2 || a.len() != b.len() || a[..a.len() - 2] != b[..b.len() - 2] {
            return Err(Error::ShapeMismatch(format!("bmm {:?} x {:?}", a, b)));
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
        if k != k2 {
            return Err(Error::ShapeMismatch(format!("bmm {:?} x {:?}", a, b)));
        }
        let batch: usize = a[..a.len() - 2].iter().product();
        self.charge(batch as u128 * m as u128 * k as u128 * n as u128);
        let mut out = a[..a.len() - 2].to_vec();
        out.push(m);
        out.push(n);
        Ok(out)
    }
    fn transpose_last(&self, a: &Vec<usize>) -> Result<Vec<usize>> {
        let mut out = a.clone();
        let n = out.len();
        out.swap(n - 1, n - 2);
        Ok(out)
    }
    fn reshape(&self, a: &Vec<usize>, shape: Vec<usize>) -> Result<Vec<usize>> {
        let from: usize = a.iter().product();
        let to: usize = shape.iter().product();
        if from != to {
            return Err(Error::ShapeMismatch(format!("reshape {:?} -> {:?}", a, shape)));
        }
        Ok(shape)
    }
    fn permute(&self, a: &Vec<usize>, axes: &[usize]) -> Result<Vec<usize>> {
        Ok(axes.iter().map(|&i| a[i]).collect())
    }
    fn concat(&self, parts: &[Vec<usize>], axis: usize) -> Result<Vec<usize>> {
        let mut out = parts[0].clone();
        out[axis] = parts.iter().map(|p| p[axis]).sum();
        Ok(out)
    }
    fn slice(&self, a: &Vec<usize>, axis: usize, _start: usize, len: usize) -> Result<Vec<usize>> {
        let mut out = a.clone();
        out[axis] = len;
        Ok(out)
    }
    fn gather_rows(&self, a: &Vec<usize>, idx: Arc<Vec<usize>>) -> Result<Vec<usize>> {
        Ok(vec![idx.len(), a[1]])
    }
    fn conv2d(
        &self,
        x: &Vec<usize>,
        w: &Vec<usize>,
        _b: Option<&Vec<usize>>,
        spec: Conv2dSpec,
    ) -> Result<Vec<usize>> {
        let out = conv2d_out_shape(x, w, &spec)?;
        // per output element: (C/groups) * kh * kw multiply-accumulates
        let per_elem = w[1] as u128 * w[2] as u128 * w[3] as u128;
        self.charge(out.iter().map(|&v| v as u128).product::<u128>() * per_elem);
        Ok(out)
    }
    fn batch_norm_eval(
        &self,
        x: &Vec<usize>,
        _gamma: &Vec<usize>,
        _beta: &Vec<usize>,
        _mean: &Tensor<T>,
        _var: &Tensor<T>,
        _eps: f64,
    ) -> Result<Vec<usize>> {
        Ok(x.clone())
    }
    fn batch_norm_train(
        &self,
        x: &Vec<usize>,
        _gamma: &Vec<usize>,
        _beta: &Vec<usize>,
        _eps: f64,
    ) -> Result<(Vec<usize>, Tensor<T>, Tensor<T>)> {
        let c = x[1];
        Ok((x.clone(), Tensor::zeros(vec![c])?, Tensor::ones(vec![c])?))
    }
    fn layer_norm(
        &self,
        x: &Vec<usize>,
        _gamma: &Vec<usize>,
        _beta: &Vec<usize>,
        _eps: f64,
    ) -> Result<Vec<usize>> {
        Ok(x.clone())
    }
    fn softmax_last(&self, x: &Vec<usize>) -> Result<Vec<usize>> {
        Ok(x.clone())
    }
    fn max_pool2(&self, x: &Vec<usize>) -> Result<Vec<usize>> {
        Ok(vec![x[0], x[1], x[2] / 2, x[3] / 2])
    }
    fn bilinear_resize(&self, x: &Vec<usize>, oh: usize, ow: usize) -> Result<Vec<usize>> {
        Ok(vec![x[0], x[1], oh, ow])
    }
    fn global_avg_pool(&self, x: &Vec<usize>) -> Result<Vec<usize>> {
        Ok(vec![x[0], x[1], 1, 1])
    }
    fn mul_channel(&self, x: &Vec<usize>, _s: &Vec<usize>) -> Result<Vec<usize>> {
        Ok(x.clone())
    }
    fn add_row(&self, x: &Vec<usize>, _b: &Vec<usize>) -> Result<Vec<usize>> {
        Ok(x.clone())
    }
    fn sum_all(&self, _x: &Vec<usize>) -> Result<Vec<usize>> {
        Ok(vec![])
    }
    fn wce_loss(
        &self,
        _logits: &Vec<usize>,
        _labels: Arc<Vec<u32>>,
        _weights: &Tensor<T>,
    ) -> Result<Vec<usize>> {
        Ok(vec![])
    }
}

/// Parameter / MAC summary for one network configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostReport {
    /// Learnable parameter count.
    pub params: u64,
    /// Parameter count including batch-norm running statistics.
    pub params_with_buffers: u64,
    /// Compute for one forward pass, in the requested unit.
    pub compute: u128,
    pub unit: FlopsUnit,
}

/// Count parameters over a slot list; buffers (running statistics) are
/// reported separately since fusion removes them.
pub fn count_params<T: Element>(slots: &[Slot<T>]) -> (u64, u64) {
    let mut params = 0u64;
    let mut buffers = 0u64;
    for s in slots {
        let n = s.get().numel() as u64;
        match s {
            Slot::Param(_) => params += n,
            Slot::Buffer(..) => buffers += n,
        }
    }
    (params, params + buffers)
}

/// Fold a conv+BN pair given as parameter bundles (convenience wrapper).
pub fn fuse_conv_bn_params<T: Element>(
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    bn: &BnParams<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    fuse_conv_bn(
        weight,
        bias,
        &bn.gamma.get(),
        &bn.beta.get(),
        &bn.running_mean.read().unwrap(),
        &bn.running_var.read().unwrap(),
        bn.eps,
    )
}
