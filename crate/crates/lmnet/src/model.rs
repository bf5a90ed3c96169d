//! The full segmentation network and its weight container.
//!
//! Layout: a stride-1 convolutional stem, four encoder stages of two
//! multi-branch modules behind a 2x2 max pool each, a global feature
//! transformer (GFT) over all five encoder levels at the coarsest scale,
//! four local feature transformers (LFT) that mix each level with its
//! (up to two) coarser neighbours under windowed attention, and a decoder
//! that walks back up, concatenating upsampled state with the LFT output at
//! each level.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{transformer_block, AttentionConfig, TransformerBlock};
use crate::autodiff::Cx;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvBn, Initializer, Mode, MultiBranchModule, Slot};
use crate::ops::Conv2dSpec;
use crate::reparam::{self, CostCx, CostReport, FlopsUnit};
use crate::tensor::{Dtype, Element, Tensor};

fn default_base_channels() -> usize {
    16
}
fn default_expansion() -> usize {
    2
}
fn default_se_reduction() -> usize {
    4
}
fn default_num_classes() -> usize {
    2
}
fn default_in_channels() -> usize {
    3
}
fn default_window() -> usize {
    7
}
fn default_heads() -> usize {
    4
}
fn default_mlp_ratio() -> usize {
    4
}
fn default_depth() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LmNetConfig {
    #[serde(default = "default_base_channels")]
    pub base_channels: usize,
    #[serde(default = "default_expansion")]
    pub expansion: usize,
    #[serde(default = "default_se_reduction")]
    pub se_reduction: usize,
    #[serde(default = "default_num_classes")]
    pub num_classes: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    /// Local attention window (odd).
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    /// Transformer blocks per GFT/LFT.
    #[serde(default = "default_depth")]
    pub depth: usize,
}

impl Default for LmNetConfig {
    fn default() -> Self {
        serde_json::from_str("{}").unwrap()
    }
}

/// Branch kernel extents of every multi-branch module.
pub const BRANCH_KERNELS: [(usize, usize); 4] = [(3, 1), (1, 3), (3, 3), (5, 5)];

impl LmNetConfig {
    /// Channel widths of the five encoder levels (stride 1, 2, 4, 8, 16).
    /// Widths double per level and are capped at eight times the base.
    pub fn level_channels(&self) -> [usize; 5] {
        let c = self.base_channels;
        [c, 2 * c, 4 * c, 8 * c, 8 * c]
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.num_classes < 2 || self.in_channels == 0 {
            return Err(Error::InvalidArgument(
                "base_channels and in_channels must be >= 1, num_classes >= 2".into(),
            ));
        }
        for &ch in &self.level_channels() {
            if self.heads == 0 || ch % self.heads != 0 {
                return Err(Error::InvalidArgument(format!(
                    "level width {} not divisible by heads {}",
                    ch, self.heads
                )));
            }
            let mid = ch * self.expansion;
            if self.se_reduction == 0 || mid % self.se_reduction != 0 {
                return Err(Error::InvalidArgument(format!(
                    "expanded width {} not divisible by se_reduction {}",
                    mid, self.se_reduction
                )));
            }
        }
        if self.window % 2 == 0 || self.window == 0 {
            return Err(Error::InvalidArgument(format!(
                "window must be odd, got {}",
                self.window
            )));
        }
        if self.depth == 0 || self.expansion == 0 || self.mlp_ratio == 0 {
            return Err(Error::InvalidArgument(
                "depth, expansion, and mlp_ratio must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Feature transformer head: 3x3 convolutional embedding of the concatenated
/// pyramid, then stacked transformer blocks run per sample.
struct FeatureTransformer<T: Element> {
    embed: Conv2d<T>,
    blocks: Vec<TransformerBlock<T>>,
    att: AttentionConfig,
    /// Indices into the encoder levels x1..x5 that feed this transformer.
    levels: Vec<usize>,
    /// Encoder level whose resolution the output uses.
    target_level: usize,
}

impl<T: Element> FeatureTransformer<T> {
    fn new(
        name: &str,
        init: &mut Initializer,
        cfg: &LmNetConfig,
        levels: Vec<usize>,
        target_level: usize,
        out_ch: usize,
        window: Option<usize>,
    ) -> Self {
        let widths = cfg.level_channels();
        let in_ch: usize = levels.iter().map(|&i| widths[i]).sum();
        let att = AttentionConfig {
            channels: out_ch,
            heads: cfg.heads,
            mlp_ratio: cfg.mlp_ratio,
            window,
            depth: cfg.depth,
        };
        let blocks = (0..cfg.depth)
            .map(|i| TransformerBlock::new(&format!("{name}.block{i}"), init, &att))
            .collect();
        Self {
            embed: Conv2d::new(
                &format!("{name}.embed"),
                init,
                out_ch,
                in_ch,
                (3, 3),
                Conv2dSpec::same(3, 3),
                true,
            ),
            blocks,
            att,
            levels,
            target_level,
        }
    }

    fn forward<C: Cx<T>>(&self, cx: &C, feats: &[C::V]) -> Result<C::V> {
        let target = cx.shape_of(&feats[self.target_level]);
        let (th, tw) = (target[2], target[3]);
        let resized: Vec<C::V> = self
            .levels
            .iter()
            .map(|&i| {
                let s = cx.shape_of(&feats[i]);
                if (s[2], s[3]) == (th, tw) {
                    Ok(feats[i].clone())
                } else {
                    cx.bilinear_resize(&feats[i], th, tw)
                }
            })
            .collect::<Result<_>>()?;
        let cat = cx.concat(&resized, 1)?;
        let emb = self.embed.forward(cx, &cat)?;
        let shape = cx.shape_of(&emb);
        let (n, c) = (shape[0], shape[1]);
        let spatial = self.att.window.map(|_| (th, tw));
        let mut outs = Vec::with_capacity(n);
        for s in 0..n {
            let xi = cx.slice(&emb, 0, s, 1)?;
            let mut tokens = cx.permute(&cx.reshape(&xi, vec![c, th * tw])?, &[1, 0])?;
            for block in &self.blocks {
                tokens = transformer_block(cx, &tokens, block, &self.att, spatial)?;
            }
            outs.push(cx.reshape(&cx.permute(&tokens, &[1, 0])?, vec![1, c, th, tw])?);
        }
        cx.concat(&outs, 0)
    }

    fn slots(&self, out: &mut Vec<Slot<T>>) {
        self.embed.slots(out);
        for b in &self.blocks {
            b.slots(out);
        }
    }
}

pub struct LmNet<T: Element> {
    pub cfg: LmNetConfig,
    stem: ConvBn<T>,
    /// Four stages of two multi-branch modules, each stage behind a 2x2 pool.
    stages: Vec<Vec<MultiBranchModule<T>>>,
    gft: FeatureTransformer<T>,
    /// LFT for levels x1..x4 (coarse to fine at indices 3..0).
    lfts: Vec<FeatureTransformer<T>>,
    /// Decoder modules for levels x4..x1 (same order as `lfts` reversed).
    decoders: Vec<MultiBranchModule<T>>,
    head: Conv2d<T>,
}

impl<T: Element> LmNet<T> {
    pub fn new(cfg: LmNetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut init = Initializer::new(ChaCha8Rng::seed_from_u64(seed));
        let widths = cfg.level_channels();
        let stem = ConvBn::new(
            "stem",
            &mut init,
            widths[0],
            cfg.in_channels,
            (3, 3),
            Conv2dSpec::same(3, 3),
        );
        let mut stages = Vec::new();
        for stage in 0..4 {
            let in_ch = widths[stage];
            let out_ch = widths[stage + 1];
            let mut blocks = Vec::new();
            for b in 0..2 {
                let block_in = if b == 0 { in_ch } else { out_ch };
                blocks.push(MultiBranchModule::new(
                    &format!("enc{}.block{}", stage + 1, b),
                    &mut init,
                    block_in,
                    out_ch,
                    cfg.expansion,
                    cfg.se_reduction,
                    &BRANCH_KERNELS,
                )?);
            }
            stages.push(blocks);
        }
        let gft = FeatureTransformer::new(
            "gft",
            &mut init,
            &cfg,
            vec![0, 1, 2, 3, 4],
            4,
            widths[4],
            None,
        );
        // LFT for level i draws on levels {i, i+1, i+2} clipped to x2..x5,
        // and emits at level i's resolution with level i's width.
        let mut lfts = Vec::new();
        for i in 0..4 {
            let levels: Vec<usize> = (i..=i + 2).filter(|&l| (1..=4).contains(&l)).collect();
            lfts.push(FeatureTransformer::new(
                &format!("lft{}", i + 1),
                &mut init,
                &cfg,
                levels,
                i,
                widths[i],
                Some(cfg.window),
            ));
        }
        // decoder: d5 = gft output (level 4); d_i = MBM(cat(up2(d_{i+1}), lft_i))
        let mut decoders = Vec::new();
        for i in (0..4).rev() {
            let in_ch = widths[i + 1] + widths[i];
            decoders.push(MultiBranchModule::new(
                &format!("dec{}", i + 1),
                &mut init,
                in_ch,
                widths[i],
                cfg.expansion,
                cfg.se_reduction,
                &BRANCH_KERNELS,
            )?);
        }
        let head = Conv2d::new(
            "head",
            &mut init,
            cfg.num_classes,
            widths[0],
            (1, 1),
            Conv2dSpec::unit(),
            true,
        );
        Ok(Self { cfg, stem, stages, gft, lfts, decoders, head })
    }

    /// Logits `[N, num_classes, H, W]` for input `[N, in_channels, H, W]`.
    /// H and W must be divisible by 16.
    pub fn forward<C: Cx<T>>(&self, cx: &C, x: &C::V, mode: Mode) -> Result<C::V> {
        let shape = cx.shape_of(x);
        if shape.len() != 4 || shape[1] != self.cfg.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "expected input [N, {}, H, W], got {:?}",
                self.cfg.in_channels, shape
            )));
        }
        let (h, w) = (shape[2], shape[3]);
        if h % 16 != 0 || w % 16 != 0 || h == 0 || w == 0 {
            return Err(Error::InvalidArgument(format!(
                "input extent {}x{} must be divisible by 16",
                h, w
            )));
        }
        let x1 = cx.relu(&self.stem.forward(cx, x, mode)?)?;
        let mut feats = vec![x1];
        for stage in &self.stages {
            let mut y = cx.max_pool2(feats.last().unwrap())?;
            for m in stage {
                y = m.forward(cx, &y, mode)?;
            }
            feats.push(y);
        }
        let mut d = self.gft.forward(cx, &feats)?;
        for (dec, lft) in self.decoders.iter().zip(self.lfts.iter().rev()) {
            let l = lft.forward(cx, &feats)?;
            let ls = cx.shape_of(&l);
            let up = cx.bilinear_resize(&d, ls[2], ls[3])?;
            let cat = cx.concat(&[up, l], 1)?;
            d = dec.forward(cx, &cat, mode)?;
        }
        self.head.forward(cx, &d)
    }

    fn modules_mut(&mut self) -> Vec<(String, &mut MultiBranchModule<T>)> {
        let mut out = Vec::new();
        for (s, stage) in self.stages.iter_mut().enumerate() {
            for (b, m) in stage.iter_mut().enumerate() {
                out.push((format!("enc{}.block{}", s + 1, b), m));
            }
        }
        for (i, m) in self.decoders.iter_mut().enumerate() {
            out.push((format!("dec{}", 4 - i), m));
        }
        out
    }

    pub fn is_fused(&self) -> bool {
        self.stages.iter().flatten().chain(self.decoders.iter()).all(|m| m.is_fused())
    }

    /// Merge the parallel branches of every multi-branch module into single
    /// convolutions. Exact in eval mode; errors if already fused.
    pub fn fuse(&mut self) -> Result<()> {
        if self.is_fused() {
            return Err(Error::InvalidArgument("model is already fused".into()));
        }
        for (name, m) in self.modules_mut() {
            reparam::fuse_multi_branch(&name, m)?;
        }
        Ok(())
    }

    /// All parameters and buffers in deterministic traversal order.
    pub fn slots(&self) -> Vec<Slot<T>> {
        let mut out = Vec::new();
        self.stem.slots(&mut out);
        for stage in &self.stages {
            for m in stage {
                m.slots(&mut out);
            }
        }
        self.gft.slots(&mut out);
        for l in &self.lfts {
            l.slots(&mut out);
        }
        for d in &self.decoders {
            d.slots(&mut out);
        }
        self.head.slots(&mut out);
        out
    }

    /// Move every normalization parameter and running statistic off its
    /// deterministic initial value. A freshly constructed network has all
    /// batch-norm shifts at exactly zero, which parks the pre-activation of
    /// any dead depthwise channel precisely on the ReLU hinge; derivative
    /// checks need a generic (differentiable) point instead.
    pub fn randomize_norms(&self, seed: u64) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |n: usize, lo: f64, hi: f64| -> Tensor<T> {
            let data: Vec<T> =
                (0..n).map(|_| T::from_f64(rng.gen_range(lo..hi))).collect();
            Tensor::new(vec![n], data).expect("rank-1 fill")
        };
        for slot in self.slots() {
            match slot {
                Slot::Param(p) => {
                    let n = p.get().numel();
                    if p.name().ends_with(".gamma") {
                        p.set(fill(n, 0.5, 1.5));
                    } else if p.name().ends_with(".beta") {
                        p.set(fill(n, -0.5, 0.5));
                    }
                }
                Slot::Buffer(name, t) => {
                    let n = t.read().unwrap().numel();
                    let v = if name.ends_with("running_var") {
                        fill(n, 0.25, 1.5)
                    } else {
                        fill(n, -0.5, 0.5)
                    };
                    *t.write().unwrap() = v;
                }
            }
        }
    }

    /// Parameter and MAC counts for one forward pass at the given extent.
    pub fn count_cost(&self, h: usize, w: usize, unit: FlopsUnit) -> Result<CostReport> {
        let slots = self.slots();
        let (params, params_with_buffers) = reparam::count_params(&slots);
        let cx = CostCx::new();
        let input = Cx::<T>::constant(&cx, Tensor::<T>::zeros(vec![1, self.cfg.in_channels, h, w])?)?;
        self.forward(&cx, &input, Mode::Eval)?;
        Ok(CostReport { params, params_with_buffers, compute: unit.apply(cx.macs()), unit })
    }
}

pub const LMW_MAGIC: &[u8; 4] = b"LMW1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    /// Byte offset into the blob section (which starts right after the header).
    pub offset: u64,
    pub len: u64,
}

/// Header of the LMW weight container: magic `LMW1`, a little-endian u32
/// header byte length, this JSON document, then the raw little-endian tensor
/// blobs in table (name) order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LmwHeader {
    pub config: LmNetConfig,
    pub fused: bool,
    pub dtype: Dtype,
    pub tensors: BTreeMap<String, TensorEntry>,
}

/// Serialize the model into the LMW container at `path`.
pub fn save_weights<T: Element>(path: &Path, model: &LmNet<T>) -> Result<()> {
    let slots = model.slots();
    let mut by_name: BTreeMap<String, Tensor<T>> = BTreeMap::new();
    for s in &slots {
        if by_name.insert(s.name().to_string(), s.get()).is_some() {
            return Err(Error::Weights(format!("duplicate tensor name {}", s.name())));
        }
    }
    let mut tensors = BTreeMap::new();
    let mut offset = 0u64;
    for (name, t) in &by_name {
        let len = (t.numel() * T::BYTES) as u64;
        tensors.insert(
            name.clone(),
            TensorEntry { shape: t.shape().to_vec(), offset, len },
        );
        offset += len;
    }
    let header = LmwHeader {
        config: model.cfg.clone(),
        fused: model.is_fused(),
        dtype: T::DTYPE,
        tensors,
    };
    let hjson = serde_json::to_vec(&header)?;
    let mut bytes = Vec::with_capacity(8 + hjson.len() + offset as usize);
    bytes.extend_from_slice(LMW_MAGIC);
    bytes.extend_from_slice(&(hjson.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&hjson);
    for t in by_name.values() {
        for &v in t.data() {
            v.write_le(&mut bytes);
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Parse and validate the container header. Returns the header and the byte
/// offset where the blob section starts.
pub fn read_header(bytes: &[u8]) -> Result<(LmwHeader, usize)> {
    if bytes.len() < 8 || &bytes[..4] != LMW_MAGIC {
        return Err(Error::Weights("not an LMW file (bad magic)".into()));
    }
    let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() < 8 + hlen {
        return Err(Error::Weights("truncated LMW header".into()));
    }
    let header: LmwHeader = serde_json::from_slice(&bytes[8..8 + hlen])
        .map_err(|e| Error::Weights(format!("corrupt LMW header: {e}")))?;
    Ok((header, 8 + hlen))
}

/// Header of the container at `path` (for dtype dispatch before loading).
pub fn peek_header(path: &Path) -> Result<LmwHeader> {
    let bytes = fs::read(path)?;
    Ok(read_header(&bytes)?.0)
}

/// Reconstruct a model from the LMW container. The element type must match
/// the stored dtype.
pub fn load_weights<T: Element>(path: &Path) -> Result<LmNet<T>> {
    let bytes = fs::read(path)?;
    let (header, data_start) = read_header(&bytes)?;
    if header.dtype != T::DTYPE {
        return Err(Error::Weights(format!(
            "container holds {:?} weights, expected {:?}",
            header.dtype,
            T::DTYPE
        )));
    }
    let mut model = LmNet::<T>::new(header.config.clone(), 0)?;
    if header.fused {
        model.fuse()?;
    }
    let slots = model.slots();
    let mut by_name: BTreeMap<&str, &Slot<T>> = BTreeMap::new();
    for s in &slots {
        by_name.insert(s.name(), s);
    }
    for (name, entry) in &header.tensors {
        let slot = by_name.remove(name.as_str()).ok_or_else(|| {
            Error::Weights(format!("container holds unknown tensor {name}"))
        })?;
        let expect = slot.get().shape().to_vec();
        if entry.shape != expect {
            return Err(Error::Weights(format!(
                "tensor {} has shape {:?}, expected {:?}",
                name, entry.shape, expect
            )));
        }
        let numel: usize = entry.shape.iter().product();
        if entry.len as usize != numel * T::BYTES {
            return Err(Error::Weights(format!("tensor {} has inconsistent byte length", name)));
        }
        let start = data_start + entry.offset as usize;
        let end = start + entry.len as usize;
        if end > bytes.len() {
            return Err(Error::Weights(format!("tensor {} extends past end of file", name)));
        }
        let data: Vec<T> = bytes[start..end]
            .chunks_exact(T::BYTES)
            .map(T::read_le)
            .collect();
        slot.set(Tensor::new(entry.shape.clone(), data)?);
    }
    if let Some((missing, _)) = by_name.into_iter().next() {
        return Err(Error::Weights(format!("container is missing tensor {missing}")));
    }
    Ok(model)
}

/// Per-pixel argmax over the class axis of logits `[N, K, H, W]`.
pub fn argmax_classes<T: Element>(logits: &Tensor<T>) -> Result<Vec<Vec<u32>>> {
    if logits.rank() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "expected [N, K, H, W] logits, got {:?}",
            logits.shape()
        )));
    }
    let (n, k, h, w) = (logits.dim(0), logits.dim(1), logits.dim(2), logits.dim(3));
    let data = logits.data();
    let mut out = Vec::with_capacity(n);
    for s in 0..n {
        let mut mask = vec![0u32; h * w];
        for p in 0..h * w {
            let mut best = 0usize;
            let mut best_v = data[s * k * h * w + p];
            for c in 1..k {
                let v = data[s * k * h * w + c * h * w + p];
                if v > best_v {
                    best_v = v;
                    best = c;
                }
            }
            mask[p] = best as u32;
        }
        out.push(mask);
    }
    Ok(out)
}
