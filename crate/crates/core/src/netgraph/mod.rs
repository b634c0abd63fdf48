// SPDX-License-Identifier: MIT OR Apache-2.0

//! Residual networks viewed as a graph of addressable blocks.
//!
//! Every residual block exposes three tap points:
//!
//! - **In**: the tensor added into the block's pre-sum output (the previous
//!   block's output, or the downsample path output when the block has one),
//! - **Pre**: the output of the block's main path, which ends in its final
//!   batch normalization,
//! - **Post**: `ReLU(In + Pre)`.
//!
//! Both the ImageNet ResNet family ([`arch`]) and hand-built synthetic
//! networks ([`synthetic`]) are represented by the same [`ResidualNet`], so
//! downstream analysis code never distinguishes them.

pub mod arch;
pub mod synthetic;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{backward_path, relu, relu_backward, run_path, run_path_cached, Layer, LayerCache, Linear};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Identifies a residual block by 1-based stage and 0-based index within it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct BlockAddress {
    pub stage: usize,
    pub block: usize,
}

impl BlockAddress {
    pub const fn new(stage: usize, block: usize) -> Self {
        Self { stage, block }
    }
}

impl fmt::Display for BlockAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.stage, self.block)
    }
}

impl FromStr for BlockAddress {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |reason: &str| Error::InvalidAddress {
            addr: s.to_string(),
            reason: reason.to_string(),
        };
        let (stage, block) = s.trim().split_once('.').ok_or_else(|| bad("expected `stage.block`"))?;
        let stage: usize = stage.parse().map_err(|_| bad("stage is not an integer"))?;
        let block: usize = block.parse().map_err(|_| bad("block is not an integer"))?;
        if stage == 0 {
            return Err(bad("stages are numbered from 1"));
        }
        Ok(Self { stage, block })
    }
}

impl TryFrom<String> for BlockAddress {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<BlockAddress> for String {
    fn from(a: BlockAddress) -> String {
        a.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TapPoint {
    In,
    Pre,
    Post,
}

impl TapPoint {
    pub const ALL: [TapPoint; 3] = [TapPoint::In, TapPoint::Pre, TapPoint::Post];

    pub fn as_str(self) -> &'static str {
        match self {
            TapPoint::In => "in",
            TapPoint::Pre => "pre",
            TapPoint::Post => "post",
        }
    }
}

impl fmt::Display for TapPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TapPoint {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "in" => Ok(TapPoint::In),
            "pre" => Ok(TapPoint::Pre),
            "post" => Ok(TapPoint::Post),
            other => Err(Error::Config(format!("unknown tap point `{other}`"))),
        }
    }
}

/// One residual block: `Post = ReLU(shortcut(x) + main(x))`.
///
/// An empty shortcut is the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock<T> {
    pub main: Vec<Layer<T>>,
    pub shortcut: Vec<Layer<T>>,
    pub out_channels: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Head<T> {
    /// Global average pool followed by a linear classifier.
    GlobalAvgLinear(Linear<T>),
    /// Linear classifier on the center-neuron vector of the last block.
    CenterLinear(Linear<T>),
}

impl<T: Scalar> Head<T> {
    pub fn classes(&self) -> usize {
        match self {
            Head::GlobalAvgLinear(l) | Head::CenterLinear(l) => l.out_features,
        }
    }

    fn forward(&self, x: &Tensor<T>) -> Vec<Vec<T>> {
        let n = x.batch();
        let c = x.channels();
        let (features, lin) = match self {
            Head::GlobalAvgLinear(lin) => {
                let f: Vec<T> = (0..n).flat_map(|b| (0..c).map(move |ch| (b, ch))).map(|(b, ch)| x.channel_mean(b, ch)).collect();
                (f, lin)
            }
            Head::CenterLinear(lin) => {
                let f: Vec<T> = (0..n).flat_map(|b| (0..c).map(move |ch| (b, ch))).map(|(b, ch)| x.center_value(b, ch)).collect();
                (f, lin)
            }
        };
        lin.forward(&features, n).chunks(lin.out_features).map(|r| r.to_vec()).collect()
    }
}

/// Per-channel input normalization applied to `[0, 1]` RGB images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocess {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Preprocess {
    pub fn imagenet() -> Self {
        Self {
            mean: vec![0.485, 0.456, 0.406],
            std: vec![0.229, 0.224, 0.225],
        }
    }

    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn descriptor(&self) -> String {
        format!("mean={:?};std={:?}", self.mean, self.std)
    }

    pub fn apply<T: Scalar>(&self, img: &Tensor<T>) -> Tensor<T> {
        let mut out = img.clone();
        for b in 0..img.batch() {
            for c in 0..img.channels() {
                let (m, s) = (T::lit(self.mean[c]), T::lit(self.std[c]));
                out.plane_mut(b, c).iter_mut().for_each(|v| *v = (*v - m) / s);
            }
        }
        out
    }

    pub fn backward<T: Scalar>(&self, grad: &Tensor<T>) -> Tensor<T> {
        let mut out = grad.clone();
        for b in 0..grad.batch() {
            for c in 0..grad.channels() {
                let s = T::lit(self.std[c]);
                out.plane_mut(b, c).iter_mut().for_each(|v| *v = *v / s);
            }
        }
        out
    }
}

/// Stem, residual stages and classifier head.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualNet<T> {
    pub input_channels: usize,
    pub stem: Vec<Layer<T>>,
    pub stages: Vec<Vec<ResidualBlock<T>>>,
    pub head: Head<T>,
}

/// Class scores per image.
pub type Logits<T> = Vec<Vec<T>>;

/// Overwrites whole Post-tap channel maps of one block with constants.
#[derive(Debug, Clone, PartialEq)]
pub struct PostOverride<T> {
    pub addr: BlockAddress,
    pub values: Vec<(usize, T)>,
}

impl<T: Scalar> PostOverride<T> {
    fn apply(&self, post: &mut Tensor<T>) {
        for b in 0..post.batch() {
            for &(c, v) in &self.values {
                post.plane_mut(b, c).iter_mut().for_each(|x| *x = v);
            }
        }
    }
}

/// Activations at all three taps of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockTaps<T> {
    pub input: Tensor<T>,
    pub pre: Tensor<T>,
    pub post: Tensor<T>,
}

impl<T: Scalar> BlockTaps<T> {
    pub fn get(&self, tap: TapPoint) -> &Tensor<T> {
        match tap {
            TapPoint::In => &self.input,
            TapPoint::Pre => &self.pre,
            TapPoint::Post => &self.post,
        }
    }
}

/// A resolved observation site: a tap at a specific block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Site {
    pub addr: BlockAddress,
    pub tap: TapPoint,
    pub channels: usize,
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.addr, self.tap)
    }
}

impl<T: Scalar> ResidualNet<T> {
    pub fn stage_count(&self) -> usize {
        self.stages.len()
    }

    pub fn blocks(&self) -> impl Iterator<Item = BlockAddress> + '_ {
        self.stages
            .iter()
            .enumerate()
            .flat_map(|(s, blocks)| (0..blocks.len()).map(move |b| BlockAddress::new(s + 1, b)))
    }

    pub fn block(&self, addr: BlockAddress) -> Result<&ResidualBlock<T>> {
        self.stages
            .get(addr.stage.wrapping_sub(1))
            .and_then(|s| s.get(addr.block))
            .ok_or_else(|| Error::InvalidAddress {
                addr: addr.to_string(),
                reason: format!("network has stages {}", self.describe_stages()),
            })
    }

    fn describe_stages(&self) -> String {
        self.stages
            .iter()
            .enumerate()
            .map(|(i, s)| format!("{}:{}", i + 1, s.len()))
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn channels(&self, addr: BlockAddress) -> Result<usize> {
        Ok(self.block(addr)?.out_channels)
    }

    /// Checks structural consistency; fails if there is nothing to tap.
    pub fn validate(&self, name: &str) -> Result<()> {
        if self.stages.iter().all(|s| s.is_empty()) {
            return Err(Error::NotResidual(name.to_string()));
        }
        let mut ch = self.input_channels;
        for l in &self.stem {
            ch = check_layer(l, ch, name)?;
        }
        for addr in self.blocks().collect::<Vec<_>>() {
            let block = self.block(addr)?;
            let mut main_ch = ch;
            for l in &block.main {
                main_ch = check_layer(l, main_ch, name)?;
            }
            let mut short_ch = ch;
            for l in &block.shortcut {
                short_ch = check_layer(l, short_ch, name)?;
            }
            if main_ch != block.out_channels || short_ch != block.out_channels {
                return Err(Error::Weights(format!(
                    "{name}: block {addr} sums {main_ch} main channels with {short_ch} shortcut channels (declared {})",
                    block.out_channels
                )));
            }
            ch = block.out_channels;
        }
        let head_in = match &self.head {
            Head::GlobalAvgLinear(l) | Head::CenterLinear(l) => l.in_features,
        };
        if head_in != ch {
            return Err(Error::Weights(format!("{name}: head expects {head_in} features, last block has {ch}")));
        }
        Ok(())
    }

    /// Forward pass on normalized input. Observed sites are captured as the
    /// pass goes; the pass stops early when no logits are requested.
    fn run(
        &self,
        x: &Tensor<T>,
        overrides: &[PostOverride<T>],
        observe: &[(BlockAddress, TapPoint)],
        want_logits: bool,
    ) -> (Option<Logits<T>>, Vec<Option<Tensor<T>>>) {
        let mut captured: Vec<Option<Tensor<T>>> = vec![None; observe.len()];
        let last_needed = observe.iter().map(|(a, _)| *a).max();
        let mut cur = run_path(&self.stem, x);
        'outer: for (si, stage) in self.stages.iter().enumerate() {
            for (bi, block) in stage.iter().enumerate() {
                let addr = BlockAddress::new(si + 1, bi);
                let wanted: Vec<usize> = observe.iter().enumerate().filter(|(_, (a, _))| *a == addr).map(|(i, _)| i).collect();
                let input = if block.shortcut.is_empty() { cur.clone() } else { run_path(&block.shortcut, &cur) };
                let pre = run_path(&block.main, &cur);
                let mut sum = input.clone();
                sum.add_assign(&pre);
                let mut post = relu(&sum);
                for o in overrides.iter().filter(|o| o.addr == addr) {
                    o.apply(&mut post);
                }
                for i in wanted {
                    captured[i] = Some(match observe[i].1 {
                        TapPoint::In => input.clone(),
                        TapPoint::Pre => pre.clone(),
                        TapPoint::Post => post.clone(),
                    });
                }
                cur = post;
                if !want_logits && Some(addr) >= last_needed {
                    break 'outer;
                }
            }
        }
        let logits = want_logits.then(|| self.head.forward(&cur));
        (logits, captured)
    }
}

fn check_layer<T: Scalar>(layer: &Layer<T>, channels: usize, name: &str) -> Result<usize> {
    match layer {
        Layer::Conv(c) if c.in_channels != channels => Err(Error::Weights(format!(
            "{name}: conv expects {} input channels, receives {channels}",
            c.in_channels
        ))),
        Layer::BatchNorm(bn) if bn.channels() != channels => Err(Error::Weights(format!(
            "{name}: batch norm over {} channels, receives {channels}",
            bn.channels()
        ))),
        l => Ok(l.output_channels(channels)),
    }
}

/// A loaded network ready for probing. Always in evaluation mode: batch
/// normalization uses frozen running statistics.
#[derive(Debug, Clone)]
pub struct NetworkHandle<T> {
    pub weights_id: String,
    pub input_resolution: usize,
    pub preprocess: Preprocess,
    pub net: ResidualNet<T>,
}

impl<T: Scalar> NetworkHandle<T> {
    pub fn new(weights_id: impl Into<String>, input_resolution: usize, preprocess: Preprocess, net: ResidualNet<T>) -> Result<Self> {
        let weights_id = weights_id.into();
        net.validate(&weights_id)?;
        if preprocess.mean.len() != net.input_channels || preprocess.std.len() != net.input_channels {
            return Err(Error::Config("preprocessing constants do not match input channels".into()));
        }
        Ok(Self {
            weights_id,
            input_resolution,
            preprocess,
            net,
        })
    }

    /// Batch-norm statistics are never updated; there is no training mode.
    pub fn eval_mode(&self) -> bool {
        true
    }

    pub fn blocks(&self) -> Vec<BlockAddress> {
        self.net.blocks().collect()
    }

    pub fn channels(&self, addr: BlockAddress) -> Result<usize> {
        self.net.channels(addr)
    }

    pub fn classes(&self) -> usize {
        self.net.head.classes()
    }

    pub fn resolve_tap(&self, addr: BlockAddress, tap: TapPoint) -> Result<Site> {
        Ok(Site {
            addr,
            tap,
            channels: self.channels(addr)?,
        })
    }

    pub fn check_channel(&self, addr: BlockAddress, channel: usize) -> Result<()> {
        let channels = self.channels(addr)?;
        if channel >= channels {
            return Err(Error::InvalidChannel {
                addr: addr.to_string(),
                channel,
                channels,
            });
        }
        Ok(())
    }

    fn check_input(&self, images: &Tensor<T>) -> Result<()> {
        if images.channels() != self.net.input_channels {
            return Err(Error::Config(format!(
                "network takes {} input channels, got {}",
                self.net.input_channels,
                images.channels()
            )));
        }
        Ok(())
    }

    /// Class logits for a batch of `[0, 1]` images.
    pub fn logits(&self, images: &Tensor<T>, overrides: &[PostOverride<T>]) -> Result<Vec<Vec<T>>> {
        self.check_input(images)?;
        let x = self.preprocess.apply(images);
        Ok(self.net.run(&x, overrides, &[], true).0.expect("logits requested"))
    }

    /// Logits together with activation maps at the given sites, captured
    /// from the same pass.
    pub fn logits_observed(
        &self,
        images: &Tensor<T>,
        overrides: &[PostOverride<T>],
        sites: &[Site],
    ) -> Result<(Logits<T>, Vec<Tensor<T>>)> {
        self.check_input(images)?;
        for s in sites {
            self.net.block(s.addr)?;
        }
        let x = self.preprocess.apply(images);
        let observe: Vec<_> = sites.iter().map(|s| (s.addr, s.tap)).collect();
        let (logits, caps) = self.net.run(&x, overrides, &observe, true);
        Ok((logits.expect("logits requested"), caps.into_iter().map(|c| c.expect("site visited")).collect()))
    }

    /// Activation map at a site, running the network only as far as needed.
    pub fn observe(&self, images: &Tensor<T>, site: Site, overrides: &[PostOverride<T>]) -> Result<Tensor<T>> {
        Ok(self.observe_many(images, &[site], overrides)?.remove(0))
    }

    pub fn observe_many(&self, images: &Tensor<T>, sites: &[Site], overrides: &[PostOverride<T>]) -> Result<Vec<Tensor<T>>> {
        self.check_input(images)?;
        for s in sites {
            self.net.block(s.addr)?;
        }
        let x = self.preprocess.apply(images);
        let observe: Vec<_> = sites.iter().map(|s| (s.addr, s.tap)).collect();
        let (_, caps) = self.net.run(&x, overrides, &observe, false);
        Ok(caps.into_iter().map(|c| c.expect("site visited")).collect())
    }

    pub fn block_taps(&self, images: &Tensor<T>, addr: BlockAddress, overrides: &[PostOverride<T>]) -> Result<BlockTaps<T>> {
        let sites: Vec<Site> = TapPoint::ALL.iter().map(|&t| self.resolve_tap(addr, t)).collect::<Result<_>>()?;
        let mut maps = self.observe_many(images, &sites, overrides)?.into_iter();
        Ok(BlockTaps {
            input: maps.next().unwrap(),
            pre: maps.next().unwrap(),
            post: maps.next().unwrap(),
        })
    }

    /// Evaluates `objective` on the activation map at `site` for a single
    /// `[0, 1]` image and returns its value with the gradient with respect
    /// to the image. `objective` returns the value and `d value / d map`.
    pub fn site_gradient(
        &self,
        image: &Tensor<T>,
        site: Site,
        objective: impl Fn(&Tensor<T>) -> (T, Tensor<T>),
    ) -> Result<(T, Tensor<T>)> {
        self.check_input(image)?;
        self.net.block(site.addr)?;
        let net = &self.net;
        let x = self.preprocess.apply(image);
        let (mut cur, stem_cache) = run_path_cached(&net.stem, &x);

        struct BlockTape<T> {
            main: Vec<LayerCache<T>>,
            short: Vec<LayerCache<T>>,
            post: Tensor<T>,
        }
        let mut tapes: Vec<(&ResidualBlock<T>, BlockTape<T>)> = Vec::new();
        let mut result = None;
        'outer: for (si, stage) in net.stages.iter().enumerate() {
            for (bi, block) in stage.iter().enumerate() {
                let addr = BlockAddress::new(si + 1, bi);
                let (input, short) = run_path_cached(&block.shortcut, &cur);
                let (pre, main) = run_path_cached(&block.main, &cur);
                let mut sum = input.clone();
                sum.add_assign(&pre);
                let post = relu(&sum);
                if addr == site.addr {
                    let map = match site.tap {
                        TapPoint::In => &input,
                        TapPoint::Pre => &pre,
                        TapPoint::Post => &post,
                    };
                    let (value, g_map) = objective(map);
                    let (g_main, g_short) = match site.tap {
                        TapPoint::In => (None, Some(g_map)),
                        TapPoint::Pre => (Some(g_map), None),
                        TapPoint::Post => {
                            let g = relu_backward(&post, &g_map);
                            (Some(g.clone()), Some(g))
                        }
                    };
                    let mut g_in = Tensor::zeros(cur.shape());
                    if let Some(g) = g_main {
                        g_in.add_assign(&backward_path(&block.main, &main, &g));
                    }
                    if let Some(g) = g_short {
                        g_in.add_assign(&backward_path(&block.shortcut, &short, &g));
                    }
                    result = Some((value, g_in));
                    break 'outer;
                }
                tapes.push((block, BlockTape { main, short, post: post.clone() }));
                cur = post;
            }
        }
        let (value, mut grad) = result.expect("site block visited");
        for (block, tape) in tapes.iter().rev() {
            let g = relu_backward(&tape.post, &grad);
            let mut g_in = backward_path(&block.main, &tape.main, &g);
            g_in.add_assign(&backward_path(&block.shortcut, &tape.short, &g));
            grad = g_in;
        }
        let grad = backward_path(&net.stem, &stem_cache, &grad);
        Ok((value, self.preprocess.backward(&grad)))
    }

    /// Theoretical receptive-field side length, in input pixels, of one
    /// neuron at `site`.
    pub fn receptive_field(&self, addr: BlockAddress, tap: TapPoint) -> Result<usize> {
        self.net.block(addr)?;
        let step = |state: (usize, usize), layers: &[Layer<T>]| {
            layers.iter().fold(state, |(rf, jump), l| match l.geometry() {
                Some((k, s, _)) => (rf + (k - 1) * jump, jump * s),
                None => (rf, jump),
            })
        };
        let mut state = step((1, 1), &self.net.stem);
        for a in self.net.blocks() {
            let block = self.net.block(a)?;
            let short = step(state, &block.shortcut);
            let main = step(state, &block.main);
            let post = (short.0.max(main.0), main.1.max(short.1));
            if a == addr {
                return Ok(match tap {
                    TapPoint::In => short.0,
                    TapPoint::Pre => main.0,
                    TapPoint::Post => post.0,
                });
            }
            state = post;
        }
        unreachable!("address validated above")
    }
}

/// Center-neuron objective: value and gradient of `map[0, channel, cy, cx]`.
pub fn center_objective<T: Scalar>(channel: usize) -> impl Fn(&Tensor<T>) -> (T, Tensor<T>) {
    move |map: &Tensor<T>| {
        let (cy, cx) = map.center();
        let mut g = Tensor::zeros(map.shape());
        g.set(0, channel, cy, cx, T::one());
        (map.at(0, channel, cy, cx), g)
    }
}

/// Whole-channel objective: spatial mean of `map[0, channel]`.
pub fn channel_objective<T: Scalar>(channel: usize) -> impl Fn(&Tensor<T>) -> (T, Tensor<T>) {
    move |map: &Tensor<T>| {
        let hw = map.height() * map.width();
        let w = T::one() / T::from_usize(hw).unwrap();
        let mut g = Tensor::zeros(map.shape());
        g.plane_mut(0, channel).iter_mut().for_each(|v| *v = w);
        (map.channel_mean(0, channel), g)
    }
}

/// Where to find checkpoint files for registered weights ids.
#[derive(Debug, Clone)]
pub struct Registry {
    pub weights_dir: PathBuf,
}

/// Environment variable naming the checkpoint directory.
pub const WEIGHTS_DIR_ENV: &str = "RESSCALE_WEIGHTS_DIR";

impl Registry {
    pub fn new(weights_dir: impl Into<PathBuf>) -> Self {
        Self {
            weights_dir: weights_dir.into(),
        }
    }

    pub fn from_env() -> Self {
        let dir = std::env::var_os(WEIGHTS_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("weights"));
        Self::new(dir)
    }

    /// Resolves `weights_id`:
    ///
    /// - a registered checkpoint id such as `resnet18-imagenet-v1`, read from
    ///   `<weights_dir>/<id>.safetensors`,
    /// - `random:<arch>:<seed>` for a randomly initialized architecture,
    /// - `synthetic:<path>` for a synthetic network spec file,
    /// - `file:<arch>:<path>` for a checkpoint at an explicit path.
    pub fn load<T: Scalar>(&self, weights_id: &str) -> Result<NetworkHandle<T>> {
        if let Some(path) = weights_id.strip_prefix("synthetic:") {
            return synthetic::SyntheticSpec::from_file(path)?.build(weights_id);
        }
        if let Some(rest) = weights_id.strip_prefix("random:") {
            let (arch_name, seed) = rest
                .rsplit_once(':')
                .ok_or_else(|| Error::UnknownWeights(weights_id.to_string()))?;
            let arch = arch::Arch::by_name(arch_name).ok_or_else(|| Error::UnknownWeights(weights_id.to_string()))?;
            let seed: u64 = seed.parse().map_err(|_| Error::UnknownWeights(weights_id.to_string()))?;
            return NetworkHandle::new(weights_id, 224, Preprocess::imagenet(), arch.random_init(seed));
        }
        if let Some(rest) = weights_id.strip_prefix("file:") {
            let (arch_name, path) = rest.split_once(':').ok_or_else(|| Error::UnknownWeights(weights_id.to_string()))?;
            let arch = arch::Arch::by_name(arch_name).ok_or_else(|| Error::UnknownWeights(weights_id.to_string()))?;
            let net = arch.load_safetensors(path)?;
            return NetworkHandle::new(weights_id, 224, Preprocess::imagenet(), net);
        }
        let arch = arch::registered(weights_id).ok_or_else(|| Error::UnknownWeights(weights_id.to_string()))?;
        let path = self.weights_dir.join(format!("{weights_id}.safetensors"));
        let net = arch.load_safetensors(&path)?;
        NetworkHandle::new(weights_id, 224, Preprocess::imagenet(), net)
    }
}

/// Loads a network by id using the environment-configured [`Registry`].
pub fn load_network<T: Scalar>(weights_id: &str) -> Result<NetworkHandle<T>> {
    Registry::from_env().load(weights_id)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn address_parse_and_render() {
        let a: BlockAddress = "2.1".parse().unwrap();
        assert_eq!(a, BlockAddress::new(2, 1));
        assert_eq!(a.to_string(), "2.1");
        assert!("2".parse::<BlockAddress>().is_err());
        assert!("0.1".parse::<BlockAddress>().is_err());
        assert!("a.b".parse::<BlockAddress>().is_err());
    }

    #[test]
    fn address_serde_as_string() {
        let a = BlockAddress::new(3, 1);
        let s = serde_json::to_string(&a).unwrap();
        assert_eq!(s, "\"3.1\"");
        assert_eq!(serde_json::from_str::<BlockAddress>(&s).unwrap(), a);
    }

    #[test]
    fn unknown_weights_id_is_rejected() {
        let err = Registry::new("/nonexistent").load::<f32>("vgg16-imagenet").unwrap_err();
        assert!(matches!(err, Error::UnknownWeights(_)));
        let err = Registry::new("/nonexistent").load::<f32>("random:resnet999:1").unwrap_err();
        assert!(matches!(err, Error::UnknownWeights(_)));
    }

    #[test]
    fn registered_checkpoint_missing_file_is_io_error() {
        let err = Registry::new("/nonexistent").load::<f32>("resnet18-imagenet-v1").unwrap_err();
        assert!(matches!(err, Error::Io { .. }), "{err}");
    }
}
