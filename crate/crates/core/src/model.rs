//! The three-branch network.
//!
//! * **Basic segmentation** sees only the target slice `x_i`: a U-Net style
//!   encoder (pre-activation conv pairs plus squeeze-and-excitation, 2x2
//!   max-pool) and a decoder that upsamples with stride-2 transposed
//!   convolutions and concatenates same-resolution encoder maps.
//! * **Reconstruction** sees the neighbours `x_{i-1}, x_{i+1}` stacked as two
//!   channels and predicts `x_i`. Same layout with fewer channels and no skip
//!   connections.
//! * **Complete segmentation** starts from the fused bottlenecks and, level by
//!   level, adds the upsampled previous map to the fusion of the two
//!   branches' decoder maps before a BN → ReLU → conv stage.
//!
//! Fusion (`I²`): `x_bd + sigmoid(W · relu(BN(x_bd ⊙ match(x_rd))))`, where
//! `match` is a learned 1x1 conv lifting reconstruction channels to the
//! segmentation width.

use crate::error::{Error, Result};
use crate::layers::{
    batchnorm, conv2d, se_block, transposed_conv2d, BatchNormParams, ConvParams, Mode, NamedTensors, SEParams,
};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub recon_fraction: f64,
    pub num_classes: usize,
    pub se_reduction: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            depth: 3,
            base_channels: 8,
            recon_fraction: 0.5,
            num_classes: 2,
            se_reduction: 4,
            height: 32,
            width: 32,
        }
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.depth == 0 {
            return bad("depth must be at least 1".into());
        }
        if self.base_channels == 0 {
            return bad("base_channels must be positive".into());
        }
        if !(self.recon_fraction > 0.0 && self.recon_fraction <= 1.0) {
            return bad(format!("recon_fraction {} not in (0, 1]", self.recon_fraction));
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes {} < 2", self.num_classes));
        }
        if self.se_reduction == 0 {
            return bad("se_reduction must be positive".into());
        }
        let f = 1usize << self.depth;
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(f) || !self.width.is_multiple_of(f) {
            return bad(format!(
                "input {}x{} not divisible by 2^{} = {f}",
                self.height, self.width, self.depth
            ));
        }
        Ok(())
    }

    /// Basic-branch channels at encoder level `k` (1-based).
    pub fn basic_channels(&self, k: usize) -> usize {
        self.base_channels << (k - 1)
    }

    /// Reconstruction-branch channels at encoder level `k` (1-based).
    pub fn recon_channels(&self, k: usize) -> usize {
        ((self.basic_channels(k) as f64 * self.recon_fraction).round() as usize).max(1)
    }

    /// SE reduction actually applied at a width of `ch`: the largest divisor
    /// of `ch` not exceeding the configured ratio.
    pub fn se_reduction_for(&self, ch: usize) -> usize {
        gcd(ch, self.se_reduction)
    }
}

/// How the complete branch merges basic and reconstruction features.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fusion {
    I2,
    /// Ablation: the fusion returns `x_bd` untouched.
    PassThrough,
}

#[derive(Debug, Clone)]
struct EncoBlock {
    bn1: BatchNormParams,
    conv1: ConvParams,
    bn2: BatchNormParams,
    conv2: ConvParams,
    se: SEParams,
}

impl EncoBlock {
    fn new(cfg: &NetworkConfig, in_ch: usize, out_ch: usize, rng: &mut SplitMix64) -> Result<Self> {
        Ok(EncoBlock {
            bn1: BatchNormParams::new(in_ch),
            conv1: ConvParams::new(in_ch, out_ch, 3, rng)?,
            bn2: BatchNormParams::new(out_ch),
            conv2: ConvParams::new(out_ch, out_ch, 3, rng)?,
            se: SEParams::new(out_ch, cfg.se_reduction_for(out_ch), rng)?,
        })
    }

    /// Returns the full-resolution block output (the skip map).
    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let h = conv2d(&batchnorm(x, &self.bn1, mode)?.relu(), &self.conv1)?;
        let h = conv2d(&batchnorm(&h, &self.bn2, mode)?.relu(), &self.conv2)?;
        se_block(&h, &self.se)
    }

    fn collect(&self, prefix: &str, params: &mut Vec<(String, Tensor)>, buffers: &mut Vec<(String, Tensor)>) {
        self.bn1.named_params(&format!("{prefix}.bn1"), params);
        self.conv1.named_params(&format!("{prefix}.conv1"), params);
        self.bn2.named_params(&format!("{prefix}.bn2"), params);
        self.conv2.named_params(&format!("{prefix}.conv2"), params);
        self.se.named_params(&format!("{prefix}.se"), params);
        self.bn1.named_buffers(&format!("{prefix}.bn1"), buffers);
        self.bn2.named_buffers(&format!("{prefix}.bn2"), buffers);
    }
}

/// Upsample, then BN → ReLU → 3x3 conv.
#[derive(Debug, Clone)]
struct DecoBlock {
    up: ConvParams,
    bn: BatchNormParams,
    conv: ConvParams,
}

impl DecoBlock {
    fn new(in_ch: usize, up_ch: usize, merged_ch: usize, out_ch: usize, rng: &mut SplitMix64) -> Result<Self> {
        Ok(DecoBlock {
            up: ConvParams::upsample(in_ch, up_ch, rng),
            bn: BatchNormParams::new(merged_ch),
            conv: ConvParams::new(merged_ch, out_ch, 3, rng)?,
        })
    }

    fn stage(&self, merged: &Tensor, mode: Mode) -> Result<Tensor> {
        conv2d(&batchnorm(merged, &self.bn, mode)?.relu(), &self.conv)
    }

    fn collect(&self, prefix: &str, params: &mut Vec<(String, Tensor)>, buffers: &mut Vec<(String, Tensor)>) {
        self.up.named_params(&format!("{prefix}.up"), params);
        self.bn.named_params(&format!("{prefix}.bn"), params);
        self.conv.named_params(&format!("{prefix}.conv"), params);
        self.bn.named_buffers(&format!("{prefix}.bn"), buffers);
    }
}

/// Parameters of one fusion site.
#[derive(Debug, Clone)]
pub struct I2Params {
    /// 1x1 conv lifting reconstruction channels to the segmentation width;
    /// absent when the widths already agree.
    pub channel_match: Option<ConvParams>,
    pub bn: BatchNormParams,
    /// The 1x1 weighting conv.
    pub weight: ConvParams,
}

impl I2Params {
    pub fn new(seg_ch: usize, recon_ch: usize, rng: &mut SplitMix64) -> Result<Self> {
        let channel_match = if seg_ch == recon_ch {
            None
        } else {
            Some(ConvParams::new(recon_ch, seg_ch, 1, rng)?)
        };
        Ok(I2Params {
            channel_match,
            bn: BatchNormParams::new(seg_ch),
            weight: ConvParams::new(seg_ch, seg_ch, 1, rng)?,
        })
    }

    fn collect(&self, prefix: &str, params: &mut Vec<(String, Tensor)>, buffers: &mut Vec<(String, Tensor)>) {
        if let Some(m) = &self.channel_match {
            m.named_params(&format!("{prefix}.match"), params);
        }
        self.bn.named_params(&format!("{prefix}.bn"), params);
        self.weight.named_params(&format!("{prefix}.weight"), params);
        self.bn.named_buffers(&format!("{prefix}.bn"), buffers);
    }
}

/// Pre-sigmoid attention logits `W · relu(BN(x_bd ⊙ match(x_rd)))`.
pub fn i2_logits(x_bd: &Tensor, x_rd: &Tensor, p: &I2Params, mode: Mode) -> Result<Tensor> {
    let (bs, rs) = (x_bd.shape(), x_rd.shape());
    if bs.len() != 4 || rs.len() != 4 || bs[0] != rs[0] || bs[2..] != rs[2..] {
        return Err(Error::Shape(format!("fusion inputs {bs:?} and {rs:?} disagree spatially")));
    }
    let matched = match &p.channel_match {
        Some(m) => conv2d(x_rd, m)?,
        None => x_rd.clone(),
    };
    let gated = x_bd.mul(&matched)?;
    conv2d(&batchnorm(&gated, &p.bn, mode)?.relu(), &p.weight)
}

/// `x_bd + sigmoid(i2_logits(..))`; output has the shape of `x_bd`.
pub fn i2_fusion(x_bd: &Tensor, x_rd: &Tensor, p: &I2Params, mode: Mode) -> Result<Tensor> {
    x_bd.add(&i2_logits(x_bd, x_rd, p, mode)?.sigmoid())
}

/// Encoder maps of one branch.
#[derive(Debug, Clone)]
pub struct EncoderFeatures {
    /// Block outputs before pooling; `skips[k-1]` has extent `H / 2^(k-1)`.
    pub skips: Vec<Tensor>,
    /// Pooled outputs `x_k^E`; `levels[k-1]` has extent `H / 2^k`. The last
    /// entry is the bottleneck.
    pub levels: Vec<Tensor>,
}

impl EncoderFeatures {
    pub fn bottleneck(&self) -> &Tensor {
        self.levels.last().expect("depth >= 1")
    }
}

#[derive(Debug, Clone)]
pub struct DecoderFeatures {
    /// `maps[j-1]` is decoder level `j`, at extent `H / 2^(depth-j)`.
    pub maps: Vec<Tensor>,
    /// Head output: class scores (segmentation) or the reconstruction.
    pub head: Tensor,
}

#[derive(Debug, Clone)]
pub struct EAAOutputs {
    pub seg_basic: Tensor,
    pub recon: Tensor,
    pub seg_complete: Tensor,
}

#[derive(Debug, Clone)]
pub struct EaaNet {
    cfg: NetworkConfig,
    fusion: Fusion,
    basic_enc: Vec<EncoBlock>,
    basic_dec: Vec<DecoBlock>,
    basic_head: ConvParams,
    recon_enc: Vec<EncoBlock>,
    recon_dec: Vec<DecoBlock>,
    recon_head: ConvParams,
    /// Index 0 fuses the bottlenecks; index `j` fuses decoder level `j`.
    fusions: Vec<I2Params>,
    complete_dec: Vec<DecoBlock>,
    complete_head: ConvParams,
}

fn check_input(x: &Tensor, cfg: &NetworkConfig, channels: usize, what: &str) -> Result<()> {
    let s = x.shape();
    if s.len() != 4 || s[1] != channels {
        return Err(Error::Shape(format!("{what} must be [N, {channels}, H, W], got {s:?}")));
    }
    let f = 1usize << cfg.depth;
    if !s[2].is_multiple_of(f) || !s[3].is_multiple_of(f) {
        return Err(Error::Config(format!(
            "{what} extent {}x{} not divisible by 2^{}",
            s[2], s[3], cfg.depth
        )));
    }
    Ok(())
}

impl EaaNet {
    pub fn new(cfg: NetworkConfig, seed: u64) -> Result<Self> {
        EaaNet::with_fusion(cfg, Fusion::I2, seed)
    }

    pub fn with_fusion(cfg: NetworkConfig, fusion: Fusion, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut root = SplitMix64::new(seed);
        let l = cfg.depth;
        let bc = |k: usize| cfg.basic_channels(k);
        let rc = |k: usize| cfg.recon_channels(k);
        // Separate streams per branch keep each branch's initialization
        // independent of the others' sizes.
        let (mut rb, mut rr, mut rf) = (root.split(), root.split(), root.split());

        let mut basic_enc = Vec::with_capacity(l);
        let mut recon_enc = Vec::with_capacity(l);
        for k in 1..=l {
            let (bin, rin) = if k == 1 { (1, 2) } else { (bc(k - 1), rc(k - 1)) };
            basic_enc.push(EncoBlock::new(&cfg, bin, bc(k), &mut rb)?);
            recon_enc.push(EncoBlock::new(&cfg, rin, rc(k), &mut rr)?);
        }

        let mut basic_dec = Vec::with_capacity(l);
        let mut recon_dec = Vec::with_capacity(l);
        let mut complete_dec = Vec::with_capacity(l);
        let mut fusions = vec![I2Params::new(bc(l), rc(l), &mut rf)?];
        for j in 1..=l {
            // Decoder level j produces the width of encoder level l - j + 1.
            let k = l - j + 1;
            let (bprev, rprev) = if j == 1 { (bc(l), rc(l)) } else { (bc(k + 1), rc(k + 1)) };
            basic_dec.push(DecoBlock::new(bprev, bc(k), 2 * bc(k), bc(k), &mut rb)?);
            recon_dec.push(DecoBlock::new(rprev, rc(k), rc(k), rc(k), &mut rr)?);
            complete_dec.push(DecoBlock::new(bprev, bc(k), bc(k), bc(k), &mut rf)?);
            fusions.push(I2Params::new(bc(k), rc(k), &mut rf)?);
        }
        let basic_head = ConvParams::new(bc(1), cfg.num_classes, 1, &mut rb)?;
        let recon_head = ConvParams::new(rc(1), 1, 1, &mut rr)?;
        let complete_head = ConvParams::new(bc(1), cfg.num_classes, 1, &mut rf)?;

        Ok(EaaNet {
            cfg,
            fusion,
            basic_enc,
            basic_dec,
            basic_head,
            recon_enc,
            recon_dec,
            recon_head,
            fusions,
            complete_dec,
            complete_head,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn fusion(&self) -> Fusion {
        self.fusion
    }

    pub fn fusion_params(&self) -> &[I2Params] {
        &self.fusions
    }

    fn encode(blocks: &[EncoBlock], x: &Tensor, mode: Mode) -> Result<EncoderFeatures> {
        let mut skips = Vec::with_capacity(blocks.len());
        let mut levels = Vec::with_capacity(blocks.len());
        let mut h = x.clone();
        for b in blocks {
            let s = b.forward(&h, mode)?;
            h = s.max_pool2x2()?;
            skips.push(s);
            levels.push(h.clone());
        }
        Ok(EncoderFeatures { skips, levels })
    }

    /// Basic-branch encoder on `x_i` (`[N, 1, H, W]`).
    pub fn basic_encoder(&self, x: &Tensor, mode: Mode) -> Result<EncoderFeatures> {
        check_input(x, &self.cfg, 1, "target slice")?;
        EaaNet::encode(&self.basic_enc, x, mode)
    }

    /// Basic-branch decoder with skip connections; `head` is `seg_basic`.
    pub fn basic_decoder(&self, enc: &EncoderFeatures, mode: Mode) -> Result<DecoderFeatures> {
        let l = self.cfg.depth;
        let mut h = enc.bottleneck().clone();
        let mut maps = Vec::with_capacity(l);
        for (j, block) in self.basic_dec.iter().enumerate() {
            let skip = &enc.skips[l - 1 - j];
            let up = transposed_conv2d(&h, &block.up)?;
            if up.shape()[2..] != skip.shape()[2..] {
                return Err(Error::Shape(format!(
                    "skip {:?} does not match upsampled {:?}",
                    skip.shape(),
                    up.shape()
                )));
            }
            h = block.stage(&Tensor::concat(&[&up, skip], 1)?, mode)?;
            maps.push(h.clone());
        }
        let head = conv2d(&h, &self.basic_head)?;
        Ok(DecoderFeatures { maps, head })
    }

    /// Reconstruction branch. Returns encoder maps, decoder maps and the
    /// sigmoid reconstruction of `x_i`.
    pub fn recon_forward(
        &self,
        x_prev: &Tensor,
        x_next: &Tensor,
        mode: Mode,
    ) -> Result<(EncoderFeatures, DecoderFeatures)> {
        if x_prev.shape() != x_next.shape() {
            return Err(Error::Shape(format!(
                "neighbour slices differ: {:?} vs {:?}",
                x_prev.shape(),
                x_next.shape()
            )));
        }
        check_input(x_prev, &self.cfg, 1, "neighbour slice")?;
        let x = Tensor::concat(&[x_prev, x_next], 1)?;
        let enc = EaaNet::encode(&self.recon_enc, &x, mode)?;
        let mut h = enc.bottleneck().clone();
        let mut maps = Vec::with_capacity(self.cfg.depth);
        for block in &self.recon_dec {
            let up = transposed_conv2d(&h, &block.up)?;
            h = block.stage(&up, mode)?;
            maps.push(h.clone());
        }
        let head = conv2d(&h, &self.recon_head)?.sigmoid();
        Ok((enc, DecoderFeatures { maps, head }))
    }

    fn fuse(&self, site: usize, x_bd: &Tensor, x_rd: &Tensor, mode: Mode) -> Result<Tensor> {
        match self.fusion {
            Fusion::I2 => i2_fusion(x_bd, x_rd, &self.fusions[site], mode),
            Fusion::PassThrough => {
                if x_bd.shape()[2..] != x_rd.shape()[2..] {
                    return Err(Error::Shape("fusion inputs disagree spatially".into()));
                }
                Ok(x_bd.clone())
            }
        }
    }

    /// Complete segmentation branch; returns class scores.
    pub fn complete_forward(
        &self,
        basic: (&EncoderFeatures, &DecoderFeatures),
        recon: (&EncoderFeatures, &DecoderFeatures),
        mode: Mode,
    ) -> Result<Tensor> {
        let mut h = self.fuse(0, basic.0.bottleneck(), recon.0.bottleneck(), mode)?;
        for (j, block) in self.complete_dec.iter().enumerate() {
            let up = transposed_conv2d(&h, &block.up)?;
            let fused = self.fuse(j + 1, &basic.1.maps[j], &recon.1.maps[j], mode)?;
            h = block.stage(&up.add(&fused)?, mode)?;
        }
        conv2d(&h, &self.complete_head)
    }

    /// Runs all three branches on a batch of slice triplets.
    pub fn forward(&self, x_prev: &Tensor, x_curr: &Tensor, x_next: &Tensor, mode: Mode) -> Result<EAAOutputs> {
        if x_curr.shape() != x_prev.shape() {
            return Err(Error::Shape(format!(
                "target {:?} and neighbours {:?} differ",
                x_curr.shape(),
                x_prev.shape()
            )));
        }
        let benc = self.basic_encoder(x_curr, mode)?;
        let bdec = self.basic_decoder(&benc, mode)?;
        let (renc, rdec) = self.recon_forward(x_prev, x_next, mode)?;
        let seg_complete = self.complete_forward((&benc, &bdec), (&renc, &rdec), mode)?;
        Ok(EAAOutputs {
            seg_basic: bdec.head,
            recon: rdec.head,
            seg_complete,
        })
    }

    /// Basic-branch scores only (skips the other branches).
    pub fn forward_basic(&self, x_curr: &Tensor, mode: Mode) -> Result<Tensor> {
        let enc = self.basic_encoder(x_curr, mode)?;
        Ok(self.basic_decoder(&enc, mode)?.head)
    }

    fn collect(&self) -> (Vec<(String, Tensor)>, Vec<(String, Tensor)>) {
        let mut p = Vec::new();
        let mut b = Vec::new();
        for (k, e) in self.basic_enc.iter().enumerate() {
            e.collect(&format!("basic.enc{}", k + 1), &mut p, &mut b);
        }
        for (j, d) in self.basic_dec.iter().enumerate() {
            d.collect(&format!("basic.dec{}", j + 1), &mut p, &mut b);
        }
        self.basic_head.named_params("basic.head", &mut p);
        for (k, e) in self.recon_enc.iter().enumerate() {
            e.collect(&format!("recon.enc{}", k + 1), &mut p, &mut b);
        }
        for (j, d) in self.recon_dec.iter().enumerate() {
            d.collect(&format!("recon.dec{}", j + 1), &mut p, &mut b);
        }
        self.recon_head.named_params("recon.head", &mut p);
        for (j, f) in self.fusions.iter().enumerate() {
            f.collect(&format!("fusion{j}"), &mut p, &mut b);
        }
        for (j, d) in self.complete_dec.iter().enumerate() {
            d.collect(&format!("complete.dec{}", j + 1), &mut p, &mut b);
        }
        self.complete_head.named_params("complete.head", &mut p);
        (p, b)
    }

    /// Trainable tensors in a fixed order with stable names.
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        self.collect().0
    }

    /// BN running statistics in a fixed order with stable names.
    pub fn named_buffers(&self) -> Vec<(String, Tensor)> {
        self.collect().1
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    /// Trainable tensors of the reconstruction branch only.
    pub fn recon_params(&self) -> Vec<Tensor> {
        self.named_params()
            .into_iter()
            .filter(|(n, _)| n.starts_with("recon."))
            .map(|(_, t)| t)
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&self) {
        for p in self.params() {
            p.zero_grad();
        }
    }
}
