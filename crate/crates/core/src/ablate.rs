// SPDX-License-Identifier: MIT OR Apache-2.0

//! Mean ablation of Post-tap channels, top-1 accuracy under center-crop
//! magnification, screened random control sets, and the aggregated
//! accuracy ratios comparing the two.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use crate::datahub::EvalScaleTransform;
use crate::datahub::{canonical_for, ActivationCache, DatasetSlice};
use crate::error::{Error, Result};
use crate::netgraph::{BlockAddress, NetworkHandle, PostOverride, Site, TapPoint};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Center-crop side for `percentage` on 256-pixel images:
/// `256 − floor(256 · p / 100)`.
pub fn eval_scale_crop_size(percentage: u32) -> usize {
    crate::datahub::crop_size_for(256, percentage)
}

/// Channels of one block to replace by their dataset-mean center activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSpec<T> {
    pub addr: BlockAddress,
    pub channels: BTreeSet<usize>,
    pub channel_means: BTreeMap<usize, T>,
}

impl<T: Scalar> AblationSpec<T> {
    /// Spec over `channels` taking means from a per-channel vector.
    pub fn from_means(addr: BlockAddress, channels: impl IntoIterator<Item = usize>, means: &[T]) -> Result<Self> {
        let channels: BTreeSet<usize> = channels.into_iter().collect();
        let mut channel_means = BTreeMap::new();
        for &c in &channels {
            channel_means.insert(c, *means.get(c).ok_or(Error::MissingMean(c))?);
        }
        Ok(Self {
            addr,
            channels,
            channel_means,
        })
    }

    /// Spec whose means come from a Post-tap activation cache of `addr`.
    pub fn from_cache(addr: BlockAddress, channels: impl IntoIterator<Item = usize>, cache: &ActivationCache<T>) -> Result<Self> {
        if cache.key.addr != addr || cache.key.tap != TapPoint::Post {
            return Err(Error::AddressMismatch {
                spec: format!("{addr}:post"),
                expected: format!("{}:{}", cache.key.addr, cache.key.tap),
            });
        }
        Self::from_means(addr, channels, &cache.channel_means())
    }

    fn to_override(&self) -> Result<PostOverride<T>> {
        let values = self
            .channels
            .iter()
            .map(|&c| self.channel_means.get(&c).map(|&m| (c, m)).ok_or(Error::MissingMean(c)))
            .collect::<Result<_>>()?;
        Ok(PostOverride { addr: self.addr, values })
    }
}

/// A network whose forward passes apply a list of Post-tap mean ablations.
#[derive(Debug, Clone)]
pub struct AblatedNetwork<'a, T> {
    pub handle: &'a NetworkHandle<T>,
    overrides: Vec<PostOverride<T>>,
}

impl<'a, T: Scalar> AblatedNetwork<'a, T> {
    pub fn unablated(handle: &'a NetworkHandle<T>) -> Self {
        Self {
            handle,
            overrides: Vec::new(),
        }
    }

    /// Adds `spec` to the ablations already applied.
    pub fn ablate(&self, spec: &AblationSpec<T>) -> Result<Self> {
        for &c in &spec.channels {
            self.handle.check_channel(spec.addr, c)?;
        }
        let mut overrides = self.overrides.clone();
        overrides.push(spec.to_override()?);
        Ok(Self {
            handle: self.handle,
            overrides,
        })
    }

    pub fn overrides(&self) -> &[PostOverride<T>] {
        &self.overrides
    }

    pub fn logits(&self, images: &Tensor<T>) -> Result<Vec<Vec<T>>> {
        self.handle.logits(images, &self.overrides)
    }

    pub fn observe(&self, images: &Tensor<T>, site: Site) -> Result<Tensor<T>> {
        self.handle.observe(images, site, &self.overrides)
    }
}

/// Network that overwrites each listed Post channel map of `spec.addr` with
/// the channel's scalar mean on every forward pass.
pub fn apply_mean_ablation<'a, T: Scalar>(handle: &'a NetworkHandle<T>, spec: &AblationSpec<T>) -> Result<AblatedNetwork<'a, T>> {
    AblatedNetwork::unablated(handle).ablate(spec)
}

/// Index of the largest logit, first on ties.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Images of a slice under one transform, held in memory as batches.
pub struct PreparedImages<T> {
    batches: Vec<(Tensor<T>, Vec<usize>)>,
}

impl<T: Scalar> PreparedImages<T> {
    pub fn load(slice: &DatasetSlice, transform: &EvalScaleTransform, batch_size: usize) -> Result<Self> {
        let labels = slice.labels();
        let batches = slice
            .batch_ranges(batch_size)
            .map(|r| {
                let idx: Vec<usize> = r.collect();
                Ok((slice.load_batch(&idx, transform)?, idx.iter().map(|&i| labels[i]).collect()))
            })
            .collect::<Result<_>>()?;
        Ok(Self { batches })
    }

    pub fn from_batches(batches: Vec<(Tensor<T>, Vec<usize>)>) -> Self {
        Self { batches }
    }

    pub fn image_count(&self) -> usize {
        self.batches.iter().map(|(_, l)| l.len()).sum()
    }
}

fn accuracy_of<T: Scalar>(net: &AblatedNetwork<T>, batches: impl Iterator<Item = Result<(Tensor<T>, Vec<usize>)>>) -> Result<f64> {
    let (mut correct, mut total) = (0usize, 0usize);
    for batch in batches {
        let (images, labels) = batch?;
        let logits = net.logits(&images)?;
        for (row, &label) in logits.iter().zip(&labels) {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("logits during accuracy evaluation".into()));
            }
            correct += usize::from(argmax(row) == label);
        }
        total += labels.len();
    }
    if total == 0 {
        return Err(Error::Dataset("cannot evaluate accuracy on an empty slice".into()));
    }
    Ok(correct as f64 / total as f64)
}

/// Top-1 accuracy over `slice` with `transform` applied to every image.
pub fn evaluate_accuracy<T: Scalar>(net: &AblatedNetwork<T>, slice: &DatasetSlice, transform: &EvalScaleTransform, batch_size: usize) -> Result<f64> {
    let labels = slice.labels();
    accuracy_of(
        net,
        slice.batch_ranges(batch_size).map(|r| {
            let idx: Vec<usize> = r.collect();
            Ok((slice.load_batch(&idx, transform)?, idx.iter().map(|&i| labels[i]).collect()))
        }),
    )
}

pub fn evaluate_accuracy_prepared<T: Scalar>(net: &AblatedNetwork<T>, images: &PreparedImages<T>) -> Result<f64> {
    accuracy_of(net, images.batches.iter().map(|(t, l)| Ok((t.clone(), l.clone()))))
}

/// Accuracy source for one slice at any percentage, optionally preloaded.
pub struct Evaluator<'s, T> {
    slice: &'s DatasetSlice,
    batch_size: usize,
    base: EvalScaleTransform,
    prepared: BTreeMap<u32, PreparedImages<T>>,
}

impl<'s, T: Scalar> Evaluator<'s, T> {
    /// `preload` keeps every transformed image in memory, trading memory for
    /// not decoding the slice again on each evaluation.
    pub fn new(handle: &NetworkHandle<T>, slice: &'s DatasetSlice, percentages: &[u32], batch_size: usize, preload: bool) -> Result<Self> {
        let base = canonical_for(handle);
        let mut prepared = BTreeMap::new();
        if preload {
            for &p in std::iter::once(&0).chain(percentages) {
                if let std::collections::btree_map::Entry::Vacant(e) = prepared.entry(p) {
                    e.insert(PreparedImages::load(slice, &EvalScaleTransform { percentage: p, ..base }, batch_size)?);
                }
            }
        }
        Ok(Self {
            slice,
            batch_size,
            base,
            prepared,
        })
    }

    pub fn transform(&self, percentage: u32) -> EvalScaleTransform {
        EvalScaleTransform { percentage, ..self.base }
    }

    pub fn accuracy(&self, net: &AblatedNetwork<T>, percentage: u32) -> Result<f64> {
        match self.prepared.get(&percentage) {
            Some(p) => evaluate_accuracy_prepared(net, p),
            None => evaluate_accuracy(net, self.slice, &self.transform(percentage), self.batch_size),
        }
    }
}

/// A screened random control set and its untransformed accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlSet {
    pub channels: Vec<usize>,
    pub accuracy: f64,
    /// Candidate sets evaluated before this one qualified.
    pub attempts: usize,
}

/// Screening parameters for random control sets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlScreening {
    /// Allowed excess of control accuracy over the invariant-set accuracy.
    pub relaxation: f64,
    /// Candidate sets tried per control before giving up.
    pub budget: usize,
}

impl Default for ControlScreening {
    fn default() -> Self {
        Self {
            relaxation: 0.0,
            budget: 200,
        }
    }
}

/// Default accuracy slack for a block: 0.01 for 3.1, 0 elsewhere.
pub fn default_relaxation(addr: BlockAddress) -> f64 {
    if addr == BlockAddress::new(3, 1) {
        0.01
    } else {
        0.0
    }
}

/// Finds a set of `k` channels outside `passing` whose ablation, without
/// any scale transform, leaves accuracy at most `target_accuracy +
/// relaxation`. Candidates are distinct random subsets of the pool.
#[allow(clippy::too_many_arguments)]
pub fn screen_random_control<T: Scalar>(
    handle: &NetworkHandle<T>,
    evaluator: &Evaluator<T>,
    addr: BlockAddress,
    k: usize,
    passing: &BTreeSet<usize>,
    means: &[T],
    target_accuracy: f64,
    screening: &ControlScreening,
    rng: &mut ChaCha8Rng,
) -> Result<ControlSet> {
    let pool: Vec<usize> = (0..handle.channels(addr)?).filter(|c| !passing.contains(c)).collect();
    if pool.len() < k {
        return Err(Error::PoolTooSmall { pool: pool.len(), k });
    }
    if k == 0 {
        return Ok(ControlSet {
            channels: Vec::new(),
            accuracy: target_accuracy,
            attempts: 0,
        });
    }
    let bound = target_accuracy + screening.relaxation;
    let distinct = binomial(pool.len(), k);
    let mut tried: HashSet<Vec<usize>> = HashSet::new();
    let mut best = f64::INFINITY;
    let mut attempts = 0;
    while attempts < screening.budget && (tried.len() as u128) < distinct {
        let mut cand: Vec<usize> = sample(rng, pool.len(), k).into_iter().map(|i| pool[i]).collect();
        cand.sort_unstable();
        if !tried.insert(cand.clone()) {
            continue;
        }
        attempts += 1;
        let spec = AblationSpec::from_means(addr, cand.iter().copied(), means)?;
        let acc = evaluator.accuracy(&apply_mean_ablation(handle, &spec)?, 0)?;
        best = best.min(acc);
        if acc <= bound + 1e-12 {
            return Ok(ControlSet {
                channels: cand,
                accuracy: acc,
                attempts,
            });
        }
    }
    Err(Error::ScreeningExhausted { attempts, best, bound })
}

fn binomial(n: usize, k: usize) -> u128 {
    let k = k.min(n - k);
    let mut r: u128 = 1;
    for i in 0..k {
        r = r.saturating_mul((n - i) as u128) / (i as u128 + 1);
    }
    r
}

/// Mean over trials of `scale_accuracy / control_accuracy[i]`.
pub fn aggregate_ratio(scale_accuracy: f64, control_accuracies: &[f64]) -> f64 {
    let sum: f64 = control_accuracies.iter().map(|&r| scale_accuracy / r).sum();
    sum / control_accuracies.len() as f64
}

/// Sample standard deviation over `sqrt(n)`; zero for fewer than two values.
pub fn standard_error(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (var / n as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub trials: usize,
    pub percentages: Vec<u32>,
    pub seed: u64,
    pub screening: ControlScreening,
    pub batch_size: usize,
    pub preload: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            trials: 10,
            percentages: vec![10, 20, 30, 40, 50],
            seed: 0,
            screening: ControlScreening::default(),
            batch_size: 32,
            preload: false,
        }
    }
}

/// Raw accuracies, control sets and ratios of one block's experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub weights_id: String,
    pub addr: BlockAddress,
    pub passing_channels: Vec<usize>,
    pub channel_means: Vec<f64>,
    pub scale_percentages: Vec<u32>,
    /// Unablated accuracy at percentage 0 and each scale percentage.
    pub unablated_acc: BTreeMap<u32, f64>,
    /// Invariant-set ablation accuracy without scale transform.
    pub no_scale_acc: f64,
    pub scale_ablate_acc: BTreeMap<u32, f64>,
    pub control_sets: Vec<ControlSet>,
    /// Per trial: control ablation accuracy at each scale percentage.
    pub rand_ablate_accs: Vec<BTreeMap<u32, f64>>,
    pub ratios: BTreeMap<u32, f64>,
    pub ratio_standard_errors: BTreeMap<u32, f64>,
    pub no_scale_ratio: f64,
    pub no_scale_standard_error: f64,
    pub trials: usize,
    pub seed: u64,
    pub trial_seeds: Vec<u64>,
    pub relaxation: f64,
}

fn trial_seed(seed: u64, addr: BlockAddress, trial: usize) -> u64 {
    let d = Sha256::digest(format!("{seed}|{addr}|trial{trial}").as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Ablates the passing channels and `trials` screened random control sets
/// of equal size, recording accuracy at percentage 0 and every configured
/// percentage. `means` holds the Post center mean of every channel of the
/// block under the untransformed pipeline.
pub fn run_ablation_experiment<T: Scalar>(
    handle: &NetworkHandle<T>,
    slice: &DatasetSlice,
    addr: BlockAddress,
    passing: &BTreeSet<usize>,
    means: &[T],
    config: &AblationConfig,
) -> Result<AblationReport> {
    if config.trials == 0 {
        return Err(Error::Config("ablation needs at least one trial".into()));
    }
    if config.percentages.iter().any(|&p| p == 0 || p >= 100) {
        return Err(Error::Config("scale percentages must lie in 1..=99".into()));
    }
    let channels = handle.channels(addr)?;
    if means.len() != channels {
        return Err(Error::MissingMean(means.len()));
    }
    let evaluator = Evaluator::new(handle, slice, &config.percentages, config.batch_size, config.preload)?;
    let all: Vec<u32> = std::iter::once(0).chain(config.percentages.iter().copied()).collect();
    let accuracies = |net: &AblatedNetwork<T>, ps: &[u32]| -> Result<BTreeMap<u32, f64>> {
        ps.par_iter().map(|&p| Ok((p, evaluator.accuracy(net, p)?))).collect()
    };

    let unablated_acc = accuracies(&AblatedNetwork::unablated(handle), &all)?;
    let inv = apply_mean_ablation(handle, &AblationSpec::from_means(addr, passing.iter().copied(), means)?)?;
    let mut scale_ablate_acc = accuracies(&inv, &all)?;
    let no_scale_acc = scale_ablate_acc.remove(&0).expect("percentage 0 evaluated");
    tracing::info!(%addr, no_scale_acc, "invariant-set ablation evaluated");

    let k = passing.len();
    let mut control_sets = Vec::with_capacity(config.trials);
    let mut rand_ablate_accs = Vec::with_capacity(config.trials);
    let mut trial_seeds = Vec::with_capacity(config.trials);
    for trial in 0..config.trials {
        let seed = trial_seed(config.seed, addr, trial);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let control = screen_random_control(handle, &evaluator, addr, k, passing, means, no_scale_acc, &config.screening, &mut rng)?;
        let net = apply_mean_ablation(handle, &AblationSpec::from_means(addr, control.channels.iter().copied(), means)?)?;
        let accs = accuracies(&net, &config.percentages)?;
        tracing::info!(%addr, trial, attempts = control.attempts, "control set screened");
        trial_seeds.push(seed);
        control_sets.push(control);
        rand_ablate_accs.push(accs);
    }

    let mut ratios = BTreeMap::new();
    let mut ratio_standard_errors = BTreeMap::new();
    for &p in &config.percentages {
        let rand: Vec<f64> = rand_ablate_accs.iter().map(|m| m[&p]).collect();
        let per_trial: Vec<f64> = rand.iter().map(|r| scale_ablate_acc[&p] / r).collect();
        ratios.insert(p, aggregate_ratio(scale_ablate_acc[&p], &rand));
        ratio_standard_errors.insert(p, standard_error(&per_trial));
    }
    let rand0: Vec<f64> = control_sets.iter().map(|c| c.accuracy).collect();
    let no_scale_ratio = aggregate_ratio(no_scale_acc, &rand0);
    let no_scale_standard_error = standard_error(&rand0.iter().map(|r| no_scale_acc / r).collect::<Vec<_>>());
    if !no_scale_ratio.is_finite() || ratios.values().any(|r| !r.is_finite()) {
        return Err(Error::NonFinite(format!("accuracy ratio for block {addr}: a control set reached zero accuracy")));
    }
    Ok(AblationReport {
        weights_id: handle.weights_id.clone(),
        addr,
        passing_channels: passing.iter().copied().collect(),
        channel_means: means.iter().map(|m| m.as_f64()).collect(),
        scale_percentages: config.percentages.clone(),
        unablated_acc,
        no_scale_acc,
        scale_ablate_acc,
        control_sets,
        rand_ablate_accs,
        ratios,
        ratio_standard_errors,
        no_scale_ratio,
        no_scale_standard_error,
        trials: config.trials,
        seed: config.seed,
        trial_seeds,
        relaxation: config.screening.relaxation,
    })
}

#[derive(Debug, Serialize)]
struct TrialRow {
    block: BlockAddress,
    trial: usize,
    percentage: u32,
    scale_ablate_acc: f64,
    rand_ablate_acc: f64,
    ratio: f64,
}

impl AblationReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self).map_err(|e| Error::Report(e.to_string()))?;
        crate::datahub::write_atomic(path, &json)
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Report(format!("{}: {e}", path.display())))
    }

    /// One CSV row per trial × percentage; percentage 0 rows hold the
    /// untransformed pair.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for (trial, control) in self.control_sets.iter().enumerate() {
            let mut rows = vec![(0, self.no_scale_acc, control.accuracy)];
            rows.extend(self.scale_percentages.iter().map(|&p| (p, self.scale_ablate_acc[&p], self.rand_ablate_accs[trial][&p])));
            for (percentage, s, r) in rows {
                w.serialize(TrialRow {
                    block: self.addr,
                    trial,
                    percentage,
                    scale_ablate_acc: s,
                    rand_ablate_acc: r,
                    ratio: s / r,
                })
                .map_err(|e| Error::Report(e.to_string()))?;
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::Report(e.to_string()))?;
        crate::datahub::write_atomic(path, &bytes)
    }
}

/// Post center means of every channel of `addr` over the untransformed
/// slice, read from or written to the cache under `cache_root`.
pub fn post_center_means<T: Scalar>(
    handle: &NetworkHandle<T>,
    slice: &DatasetSlice,
    addr: BlockAddress,
    batch_size: usize,
    cache_root: Option<&Path>,
) -> Result<Vec<T>> {
    let cache = match cache_root {
        Some(root) => crate::datahub::cached_center_activations(handle, slice, addr, TapPoint::Post, None, batch_size, root)?,
        None => crate::datahub::sweep_center_activations(handle, slice, addr, TapPoint::Post, None, batch_size)?,
    };
    Ok(cache.channel_means())
}
