//! Residual U-Net for pixel-wise binary segmentation.
//!
//! Encoder and decoder stages are stacks of pre-activation residual blocks
//! (`norm → relu → conv3x3` twice, plus an identity or 1×1-projected skip).
//! Scales are connected by 2×2 max pooling on the way down and nearest-neighbour
//! upsampling followed by skip concatenation on the way up. A final norm/relu and a
//! 1×1 convolution produce a single logit channel at input resolution.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Image;
use crate::error::{Error, Result};
use crate::hashing::{canonical_hash, sha256_hex};
use crate::nn::layers::{self, BatchNorm2d, BnCache, Conv2d, Mode};
use crate::nn::Tensor;

/// Name of the tap fed into the 1×1 output head.
pub const DEFAULT_CAM_LAYER: &str = "decoder.out";

/// Initial output bias, a prior of roughly 10% foreground.
const HEAD_BIAS_PRIOR: f32 = -2.197;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub base_width: usize,
    pub depth: usize,
    pub residual_blocks_per_scale: usize,
    pub out_channels: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            base_width: 16,
            depth: 4,
            residual_blocks_per_scale: 2,
            out_channels: 1,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(Error::Config("network depth must be >= 1".into()));
        }
        if self.base_width < 4 {
            return Err(Error::Config("network base_width must be >= 4".into()));
        }
        if self.residual_blocks_per_scale < 1 {
            return Err(Error::Config(
                "residual_blocks_per_scale must be >= 1".into(),
            ));
        }
        if self.in_channels != 3 || self.out_channels != 1 {
            return Err(Error::Config(
                "network maps 3 input channels to 1 logit channel".into(),
            ));
        }
        Ok(())
    }

    pub fn config_hash(&self) -> String {
        canonical_hash(self)
    }

    /// Spatial dimensions must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }

    fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    /// Activation names usable as Grad-CAM targets, shallow to deep along the data path.
    pub fn layer_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (0..self.depth).map(|i| format!("enc{i}")).collect();
        names.push("bottleneck".into());
        names.extend((0..self.depth).rev().map(|i| format!("dec{i}")));
        names.push(DEFAULT_CAM_LAYER.into());
        names
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    bn1: BatchNorm2d,
    conv1: Conv2d,
    bn2: BatchNorm2d,
    conv2: Conv2d,
    proj: Option<Conv2d>,
}

struct BlockTrace {
    input: Option<Tensor>,
    bn1: BnCache,
    a1: Tensor,
    bn2: BnCache,
    a2: Tensor,
}

impl ResBlock {
    fn new(in_c: usize, out_c: usize, rng: &mut ChaCha8Rng) -> Self {
        let conv1 = Conv2d::new(in_c, out_c, 3, rng);
        let conv2 = Conv2d::new(out_c, out_c, 3, rng);
        let proj = (in_c != out_c).then(|| Conv2d::new(in_c, out_c, 1, rng));
        Self {
            bn1: BatchNorm2d::new(in_c),
            conv1,
            bn2: BatchNorm2d::new(out_c),
            conv2,
            proj,
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            bn1: self.bn1.zeros_like(),
            conv1: self.conv1.zeros_like(),
            bn2: self.bn2.zeros_like(),
            conv2: self.conv2.zeros_like(),
            proj: self.proj.as_ref().map(Conv2d::zeros_like),
        }
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> (Tensor, BlockTrace) {
        let (n1, bn1) = self.bn1.forward(x, mode);
        let a1 = layers::relu(&n1);
        let h = self.conv1.forward(&a1);
        let (n2, bn2) = self.bn2.forward(&h, mode);
        let a2 = layers::relu(&n2);
        let mut y = self.conv2.forward(&a2);
        match &self.proj {
            Some(p) => y.add_assign(&p.forward(x)),
            None => y.add_assign(x),
        }
        let input = self.proj.is_some().then(|| x.clone());
        (
            y,
            BlockTrace {
                input,
                bn1,
                a1,
                bn2,
                a2,
            },
        )
    }

    fn infer(&self, x: &Tensor) -> Tensor {
        self.forward(x, Mode::Eval).0
    }

    fn backward(&self, t: &BlockTrace, dy: &Tensor, mut grad: Option<&mut ResBlock>) -> Tensor {
        let da2 = self
            .conv2
            .backward(&t.a2, dy, grad.as_deref_mut().map(|g| &mut g.conv2));
        let dn2 = layers::relu_backward(&t.a2, &da2);
        let dh = self
            .bn2
            .backward(&t.bn2, &dn2, grad.as_deref_mut().map(|g| &mut g.bn2));
        let da1 = self
            .conv1
            .backward(&t.a1, &dh, grad.as_deref_mut().map(|g| &mut g.conv1));
        let dn1 = layers::relu_backward(&t.a1, &da1);
        let mut dx = self
            .bn1
            .backward(&t.bn1, &dn1, grad.as_deref_mut().map(|g| &mut g.bn1));
        match (&self.proj, &t.input) {
            (Some(p), Some(input)) => {
                let gp = grad.as_deref_mut().and_then(|g| g.proj.as_mut());
                dx.add_assign(&p.backward(input, dy, gp));
            }
            _ => dx.add_assign(dy),
        }
        dx
    }

    fn commit_running(&mut self, t: &BlockTrace, batch: usize, plane_in: usize, plane_out: usize) {
        self.bn1.commit_running(&t.bn1, batch * plane_in);
        self.bn2.commit_running(&t.bn2, batch * plane_out);
    }

    fn params_mut(&mut self, out: &mut Vec<*mut Vec<f32>>) {
        out.push(&mut self.bn1.gamma);
        out.push(&mut self.bn1.beta);
        out.push(&mut self.conv1.weight);
        out.push(&mut self.conv1.bias);
        out.push(&mut self.bn2.gamma);
        out.push(&mut self.bn2.beta);
        out.push(&mut self.conv2.weight);
        out.push(&mut self.conv2.bias);
        if let Some(p) = &mut self.proj {
            out.push(&mut p.weight);
            out.push(&mut p.bias);
        }
    }

    fn buffers_mut(&mut self, out: &mut Vec<*mut Vec<f32>>) {
        out.push(&mut self.bn1.running_mean);
        out.push(&mut self.bn1.running_var);
        out.push(&mut self.bn2.running_mean);
        out.push(&mut self.bn2.running_var);
    }
}

fn run_blocks(blocks: &[ResBlock], x: Tensor, mode: Mode) -> (Tensor, Vec<BlockTrace>) {
    let mut cur = x;
    let mut traces = Vec::with_capacity(blocks.len());
    for b in blocks {
        let (y, t) = b.forward(&cur, mode);
        traces.push(t);
        cur = y;
    }
    (cur, traces)
}

fn backward_blocks(
    blocks: &[ResBlock],
    traces: &[BlockTrace],
    dy: Tensor,
    mut grads: Option<&mut Vec<ResBlock>>,
) -> Tensor {
    let mut d = dy;
    for (i, (b, t)) in blocks.iter().zip(traces).enumerate().rev() {
        let g = grads.as_deref_mut().map(|g| &mut g[i]);
        d = b.backward(t, &d, g);
    }
    d
}

/// Cached activations of one traced forward pass.
pub struct Trace {
    mode: Mode,
    input: Tensor,
    enc: Vec<Vec<BlockTrace>>,
    enc_out: Vec<Tensor>,
    pool_arg: Vec<Vec<u8>>,
    bottleneck: Vec<BlockTrace>,
    bottleneck_out: Tensor,
    dec: Vec<Vec<BlockTrace>>,
    dec_out: Vec<Tensor>,
    head_bn: BnCache,
    head_act: Tensor,
}

impl Trace {
    /// Activation recorded under a layer name from [`NetworkConfig::layer_names`].
    pub fn activation(&self, name: &str) -> Option<&Tensor> {
        if name == DEFAULT_CAM_LAYER {
            return Some(&self.head_act);
        }
        if name == "bottleneck" {
            return Some(&self.bottleneck_out);
        }
        if let Some(i) = name.strip_prefix("enc").and_then(|s| s.parse::<usize>().ok()) {
            return self.enc_out.get(i);
        }
        if let Some(i) = name.strip_prefix("dec").and_then(|s| s.parse::<usize>().ok()) {
            return self.dec_out.get(i);
        }
        None
    }
}

/// The trainable network. Parameter tensors are plain vectors so a zeroed clone doubles as
/// the gradient accumulator.
#[derive(Clone, Debug)]
pub struct UNet {
    config: NetworkConfig,
    stem: Conv2d,
    enc: Vec<Vec<ResBlock>>,
    bottleneck: Vec<ResBlock>,
    dec: Vec<Vec<ResBlock>>,
    head_bn: BatchNorm2d,
    head: Conv2d,
}

impl UNet {
    pub fn new(config: &NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = config.residual_blocks_per_scale;
        let stem = Conv2d::new(config.in_channels, config.width(0), 3, &mut rng);
        let mut enc = Vec::new();
        for level in 0..config.depth {
            let in_c = if level == 0 {
                config.width(0)
            } else {
                config.width(level - 1)
            };
            let mut blocks = vec![ResBlock::new(in_c, config.width(level), &mut rng)];
            for _ in 1..b {
                blocks.push(ResBlock::new(config.width(level), config.width(level), &mut rng));
            }
            enc.push(blocks);
        }
        let deep = config.width(config.depth);
        let mut bottleneck = vec![ResBlock::new(config.width(config.depth - 1), deep, &mut rng)];
        for _ in 1..b {
            bottleneck.push(ResBlock::new(deep, deep, &mut rng));
        }
        let mut dec: Vec<Vec<ResBlock>> = Vec::with_capacity(config.depth);
        for level in 0..config.depth {
            let out_c = config.width(level);
            let in_c = config.width(level + 1) + out_c;
            let mut blocks = vec![ResBlock::new(in_c, out_c, &mut rng)];
            for _ in 1..b {
                blocks.push(ResBlock::new(out_c, out_c, &mut rng));
            }
            dec.push(blocks);
        }
        let head_bn = BatchNorm2d::new(config.width(0));
        let mut head = Conv2d::new(config.width(0), config.out_channels, 1, &mut rng);
        head.bias.fill(HEAD_BIAS_PRIOR);
        Ok(Self {
            config: config.clone(),
            stem,
            enc,
            bottleneck,
            dec,
            head_bn,
            head,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn zeros_like(&self) -> Self {
        let z = |v: &Vec<ResBlock>| v.iter().map(ResBlock::zeros_like).collect::<Vec<_>>();
        Self {
            config: self.config.clone(),
            stem: self.stem.zeros_like(),
            enc: self.enc.iter().map(z).collect(),
            bottleneck: z(&self.bottleneck),
            dec: self.dec.iter().map(z).collect(),
            head_bn: self.head_bn.zeros_like(),
            head: self.head.zeros_like(),
        }
    }

    fn param_ptrs(&mut self, include_buffers: bool) -> Vec<*mut Vec<f32>> {
        let mut out: Vec<*mut Vec<f32>> = vec![&mut self.stem.weight, &mut self.stem.bias];
        let mut blocks: Vec<&mut ResBlock> = Vec::new();
        for level in &mut self.enc {
            blocks.extend(level.iter_mut());
        }
        blocks.extend(self.bottleneck.iter_mut());
        for level in &mut self.dec {
            blocks.extend(level.iter_mut());
        }
        for b in blocks {
            b.params_mut(&mut out);
            if include_buffers {
                b.buffers_mut(&mut out);
            }
        }
        out.push(&mut self.head_bn.gamma);
        out.push(&mut self.head_bn.beta);
        if include_buffers {
            out.push(&mut self.head_bn.running_mean);
            out.push(&mut self.head_bn.running_var);
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    /// Trainable parameter tensors in a fixed order.
    pub fn params_mut(&mut self) -> Vec<&mut Vec<f32>> {
        // SAFETY: every pointer targets a distinct field of `self`, borrowed for the
        // lifetime of the returned vector.
        self.param_ptrs(false)
            .into_iter()
            .map(|p| unsafe { &mut *p })
            .collect()
    }

    /// Parameters plus normalization running statistics, in serialization order.
    fn state_mut(&mut self) -> Vec<&mut Vec<f32>> {
        // SAFETY: as in `params_mut`.
        self.param_ptrs(true)
            .into_iter()
            .map(|p| unsafe { &mut *p })
            .collect()
    }

    fn state(&self) -> Vec<Vec<f32>> {
        let mut copy = self.clone();
        copy.state_mut().into_iter().map(|v| v.clone()).collect()
    }

    pub fn parameter_count(&self) -> usize {
        let mut copy = self.clone();
        copy.params_mut().iter().map(|v| v.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.fill(0.0);
        }
    }

    /// Serialized state: little-endian `f32` values of every parameter and buffer.
    pub fn state_bytes(&self) -> Vec<u8> {
        let state = self.state();
        let total: usize = state.iter().map(Vec::len).sum();
        let mut out = Vec::with_capacity(total * 4);
        for v in state {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn weights_hash(&self) -> String {
        sha256_hex(&self.state_bytes())
    }

    fn load_state_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        let mut state = self.state_mut();
        let total: usize = state.iter().map(|v| v.len()).sum();
        if bytes.len() != total * 4 {
            return Err(Error::Corrupt(format!(
                "expected {} bytes of weights, found {}",
                total * 4,
                bytes.len()
            )));
        }
        let mut vals = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        for v in state.iter_mut() {
            for x in v.iter_mut() {
                *x = vals.next().expect("length checked");
            }
        }
        Ok(())
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.c != self.config.in_channels {
            return Err(Error::Shape(format!(
                "expected {} input channels, got {}",
                self.config.in_channels, x.c
            )));
        }
        let m = self.config.size_multiple();
        if x.h == 0 || x.w == 0 || x.h % m != 0 || x.w % m != 0 {
            return Err(Error::Shape(format!(
                "input {}x{} is not divisible by {m} (2^depth)",
                x.h, x.w
            )));
        }
        Ok(())
    }

    /// Evaluation-mode forward pass producing `(batch, 1, H, W)` logits.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut cur = self.stem.forward(x);
        let mut skips = Vec::with_capacity(self.config.depth);
        for level in &self.enc {
            for b in level {
                cur = b.infer(&cur);
            }
            let (p, _) = layers::maxpool2(&cur);
            skips.push(cur);
            cur = p;
        }
        for b in &self.bottleneck {
            cur = b.infer(&cur);
        }
        for (level, skip) in self.dec.iter().zip(skips.iter()).rev() {
            cur = layers::concat(&layers::upsample2(&cur), skip);
            for b in level {
                cur = b.infer(&cur);
            }
        }
        let (n, _) = self.head_bn.forward(&cur, Mode::Eval);
        Ok(self.head.forward(&layers::relu(&n)))
    }

    /// Forward pass retaining everything the backward pass and Grad-CAM need.
    pub fn forward_traced(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, Trace)> {
        self.check_input(x)?;
        let mut cur = self.stem.forward(x);
        let mut enc = Vec::new();
        let mut enc_out = Vec::new();
        let mut pool_arg = Vec::new();
        for level in &self.enc {
            let (y, t) = run_blocks(level, cur, mode);
            let (p, arg) = layers::maxpool2(&y);
            enc.push(t);
            enc_out.push(y);
            pool_arg.push(arg);
            cur = p;
        }
        let (bottleneck_out, bottleneck) = run_blocks(&self.bottleneck, cur, mode);
        cur = bottleneck_out.clone();
        let mut dec: Vec<Vec<BlockTrace>> = (0..self.config.depth).map(|_| Vec::new()).collect();
        let mut dec_out: Vec<Tensor> = (0..self.config.depth).map(|_| Tensor::zeros(0, 0, 0, 0)).collect();
        for level in (0..self.config.depth).rev() {
            let joined = layers::concat(&layers::upsample2(&cur), &enc_out[level]);
            let (y, t) = run_blocks(&self.dec[level], joined, mode);
            dec[level] = t;
            dec_out[level] = y.clone();
            cur = y;
        }
        let (n, head_bn) = self.head_bn.forward(&cur, mode);
        let head_act = layers::relu(&n);
        let logits = self.head.forward(&head_act);
        Ok((
            logits,
            Trace {
                mode,
                input: x.clone(),
                enc,
                enc_out,
                pool_arg,
                bottleneck,
                bottleneck_out,
                dec,
                dec_out,
                head_bn,
                head_act,
            },
        ))
    }

    /// Backpropagates `dlogits` through a trace. Parameter gradients accumulate into `grads`
    /// when given; gradients with respect to the named activations in `taps` are returned.
    pub fn backward(
        &self,
        trace: &Trace,
        dlogits: &Tensor,
        mut grads: Option<&mut UNet>,
        taps: &[&str],
    ) -> BTreeMap<String, Tensor> {
        let mut tapped = BTreeMap::new();
        let mut record = |name: String, t: &Tensor| {
            if taps.iter().any(|n| *n == name) {
                tapped.insert(name, t.clone());
            }
        };
        let d_act = self
            .head
            .backward(&trace.head_act, dlogits, grads.as_deref_mut().map(|g| &mut g.head));
        record(DEFAULT_CAM_LAYER.into(), &d_act);
        let dn = layers::relu_backward(&trace.head_act, &d_act);
        let mut d = self
            .head_bn
            .backward(&trace.head_bn, &dn, grads.as_deref_mut().map(|g| &mut g.head_bn));
        let mut d_skips: Vec<Option<Tensor>> = (0..self.config.depth).map(|_| None).collect();
        for level in 0..self.config.depth {
            record(format!("dec{level}"), &d);
            let dj = backward_blocks(
                &self.dec[level],
                &trace.dec[level],
                d,
                grads.as_deref_mut().map(|g| &mut g.dec[level]),
            );
            let up_c = self.config.width(level + 1);
            let (d_up, d_skip) = layers::split(&dj, up_c);
            d_skips[level] = Some(d_skip);
            d = layers::upsample2_backward(&d_up);
        }
        record("bottleneck".into(), &d);
        d = backward_blocks(
            &self.bottleneck,
            &trace.bottleneck,
            d,
            grads.as_deref_mut().map(|g| &mut g.bottleneck),
        );
        for level in (0..self.config.depth).rev() {
            let out = &trace.enc_out[level];
            let mut de = layers::maxpool2_backward(&trace.pool_arg[level], &d, out.h, out.w);
            de.add_assign(d_skips[level].as_ref().expect("decoder visited every level"));
            record(format!("enc{level}"), &de);
            d = backward_blocks(
                &self.enc[level],
                &trace.enc[level],
                de,
                grads.as_deref_mut().map(|g| &mut g.enc[level]),
            );
        }
        if let Some(g) = grads {
            self.stem.backward(&trace.input, &d, Some(&mut g.stem));
        }
        tapped
    }

    /// Folds the batch statistics of a training-mode trace into the running statistics.
    pub fn commit_running_stats(&mut self, trace: &Trace) {
        if trace.mode != Mode::Train {
            return;
        }
        let n = trace.input.n;
        let (h, w) = (trace.input.h, trace.input.w);
        let plane = |level: usize| (h >> level) * (w >> level);
        for (level, (blocks, traces)) in self.enc.iter_mut().zip(&trace.enc).enumerate() {
            for (b, t) in blocks.iter_mut().zip(traces) {
                b.commit_running(t, n, plane(level), plane(level));
            }
        }
        let depth = self.config.depth;
        for (b, t) in self.bottleneck.iter_mut().zip(&trace.bottleneck) {
            b.commit_running(t, n, plane(depth), plane(depth));
        }
        for (level, (blocks, traces)) in self.dec.iter_mut().zip(&trace.dec).enumerate() {
            for (b, t) in blocks.iter_mut().zip(traces) {
                b.commit_running(t, n, plane(level), plane(level));
            }
        }
        self.head_bn.commit_running(&trace.head_bn, n * plane(0));
    }
}

/// A network together with its provenance, as stored on disk.
#[derive(Clone, Debug)]
pub struct SegmentationNetwork {
    pub net: UNet,
    pub training_run_id: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct WeightsSidecar {
    pub config: NetworkConfig,
    pub config_hash: String,
    pub weights_hash: String,
    pub training_run_id: Option<String>,
}

const MAGIC: &[u8; 8] = b"CCUNET01";

pub fn sidecar_path(weights: &Path) -> PathBuf {
    weights.with_extension("json")
}

impl SegmentationNetwork {
    pub fn build(config: &NetworkConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            net: UNet::new(config, seed)?,
            training_run_id: None,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        self.net.config()
    }

    pub fn weights_hash(&self) -> String {
        self.net.weights_hash()
    }

    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        self.net.forward(batch)
    }

    /// Writes the weight blob at `path` and the JSON sidecar next to it.
    pub fn save(&self, path: &Path) -> Result<WeightsSidecar> {
        let state = self.net.state_bytes();
        let sidecar = WeightsSidecar {
            config: self.config().clone(),
            config_hash: self.config().config_hash(),
            weights_hash: sha256_hex(&state),
            training_run_id: self.training_run_id.clone(),
        };
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut blob = Vec::with_capacity(state.len() + 16);
        blob.extend_from_slice(MAGIC);
        blob.extend_from_slice(&(state.len() as u64).to_le_bytes());
        blob.extend_from_slice(&state);
        crate::fsutil::write_atomic(path, &blob)?;
        crate::fsutil::write_atomic(
            &sidecar_path(path),
            serde_json::to_string_pretty(&sidecar)?.as_bytes(),
        )?;
        Ok(sidecar)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::load_checked(path, None)
    }

    /// Loads weights, verifying both hashes and, when given, that the stored architecture
    /// equals `expected`.
    pub fn load_checked(path: &Path, expected: Option<&NetworkConfig>) -> Result<Self> {
        let side_path = sidecar_path(path);
        let side_text = fs::read_to_string(&side_path).map_err(|e| Error::io(&side_path, e))?;
        let sidecar: WeightsSidecar = serde_json::from_str(&side_text)
            .map_err(|e| Error::Corrupt(format!("{}: {e}", side_path.display())))?;
        if sidecar.config.config_hash() != sidecar.config_hash {
            return Err(Error::Corrupt(format!(
                "config hash mismatch in {}",
                side_path.display()
            )));
        }
        if let Some(exp) = expected {
            if exp != &sidecar.config {
                return Err(Error::Config(format!(
                    "stored network config {} differs from requested {}",
                    serde_json::to_string(&sidecar.config)?,
                    serde_json::to_string(exp)?
                )));
            }
        }
        let blob = fs::read(path).map_err(|e| Error::io(path, e))?;
        if blob.len() < 16 || &blob[..8] != MAGIC {
            return Err(Error::Corrupt(format!("{}: bad header", path.display())));
        }
        let len = u64::from_le_bytes(blob[8..16].try_into().expect("8 bytes")) as usize;
        let state = &blob[16..];
        if state.len() != len {
            return Err(Error::Corrupt(format!(
                "{}: truncated ({} of {len} bytes)",
                path.display(),
                state.len()
            )));
        }
        if sha256_hex(state) != sidecar.weights_hash {
            return Err(Error::Corrupt(format!(
                "{}: weights hash mismatch",
                path.display()
            )));
        }
        let mut net = UNet::new(&sidecar.config, 0)?;
        net.load_state_bytes(state)?;
        Ok(Self {
            net,
            training_run_id: sidecar.training_run_id,
        })
    }
}

/// Tile origins along one axis and the tile extent. Images no larger than `tile` are run
/// whole; larger ones are covered by tiles overlapping by a quarter of their size.
fn axis_tiles(dim: usize, tile: usize, multiple: usize) -> Result<(Vec<usize>, usize)> {
    if dim <= tile {
        if dim % multiple != 0 {
            return Err(Error::Shape(format!(
                "image side {dim} is not divisible by {multiple} (2^depth)"
            )));
        }
        return Ok((vec![0], dim));
    }
    if tile == 0 || tile % multiple != 0 {
        return Err(Error::Shape(format!(
            "tile size {tile} is not a positive multiple of {multiple}"
        )));
    }
    let stride = (tile - tile / 4).max(1);
    let mut origins = Vec::new();
    let mut o = 0;
    while o + tile < dim {
        origins.push(o);
        o += stride;
    }
    origins.push(dim - tile);
    Ok((origins, tile))
}

/// For each coordinate, the tile whose center is nearest (first tile on ties).
fn axis_owner(dim: usize, origins: &[usize], size: usize) -> Vec<usize> {
    (0..dim)
        .map(|x| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (i, &o) in origins.iter().enumerate() {
                let d = (x as f64 + 0.5 - (o as f64 + size as f64 / 2.0)).abs();
                if d < best_d {
                    best_d = d;
                    best = i;
                }
            }
            best
        })
        .collect()
}

impl SegmentationNetwork {
    /// Logits for one image at native resolution, row-major `H × W`. Images larger than
    /// `tile` are processed in overlapping tiles; every output pixel comes from the tile
    /// whose center is closest to it.
    pub fn predict_image(&self, image: &Image, tile: usize) -> Result<Vec<f32>> {
        let (h, w) = (image.height, image.width);
        let m = self.config().size_multiple();
        let (rows, th) = axis_tiles(h, tile, m)?;
        let (cols, tw) = axis_tiles(w, tile, m)?;
        if rows.len() == 1 && cols.len() == 1 {
            let x = Tensor::from_vec(1, 3, h, w, image.data.clone());
            return Ok(self.net.forward(&x)?.data);
        }
        let row_owner = axis_owner(h, &rows, th);
        let col_owner = axis_owner(w, &cols, tw);
        let plane = h * w;
        let mut out = vec![0.0f32; plane];
        for (ti, &r0) in rows.iter().enumerate() {
            for (tj, &c0) in cols.iter().enumerate() {
                let mut x = Tensor::zeros(1, 3, th, tw);
                for ch in 0..3 {
                    let src = &image.data[ch * plane..(ch + 1) * plane];
                    let dst = &mut x.data[ch * th * tw..(ch + 1) * th * tw];
                    for r in 0..th {
                        let s = (r0 + r) * w + c0;
                        dst[r * tw..(r + 1) * tw].copy_from_slice(&src[s..s + tw]);
                    }
                }
                let y = self.net.forward(&x)?;
                for r in 0..th {
                    if row_owner[r0 + r] != ti {
                        continue;
                    }
                    for c in 0..tw {
                        if col_owner[c0 + c] == tj {
                            out[(r0 + r) * w + c0 + c] = y.data[r * tw + c];
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}
