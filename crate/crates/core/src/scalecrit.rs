// SPDX-License-Identifier: MIT OR Apache-2.0

//! The center-crop-and-magnify transform and the two scale-invariance
//! criteria evaluated on a channel's In/Pre/Post visualization triple.
//!
//! A channel passes when both hold:
//!
//! - `ReLU(Pre_c(X_in)) < Pre_c(S(X_in))`: the Pre tap prefers the magnified
//!   In visualization over the original.
//! - `2/3 < Post_c(X_in) / Post_c(X_pre) < 3/2`: the Post tap responds
//!   similarly to both visualizations.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featviz::{fz_triple, FeatureVisual, FzConfig, FzMode};
use crate::imgops::{center_crop, resize_bilinear};
use crate::netgraph::{BlockAddress, NetworkHandle, TapPoint};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Center crop to `crop_to` followed by a bilinear resize to `resize_to`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleTransform {
    pub crop_to: usize,
    pub resize_to: usize,
}

impl Default for ScaleTransform {
    fn default() -> Self {
        Self::for_resolution(224)
    }
}

impl ScaleTransform {
    /// 2× magnification for square inputs of side `resolution`.
    pub fn for_resolution(resolution: usize) -> Self {
        Self {
            crop_to: resolution / 2,
            resize_to: resolution,
        }
    }

    /// Magnifies the center of a `resize_to × resize_to` image batch.
    pub fn scale_up<T: Scalar>(&self, img: &Tensor<T>) -> Result<Tensor<T>> {
        if img.height() != self.resize_to || img.width() != self.resize_to {
            return Err(Error::Resolution {
                expected: self.resize_to,
                height: img.height(),
                width: img.width(),
            });
        }
        Ok(resize_bilinear(&center_crop(img, self.crop_to), self.resize_to, self.resize_to, false))
    }
}

/// Magnifies the central half of a 224×224 image back to 224×224.
pub fn scale_up<T: Scalar>(img: &Tensor<T>) -> Result<Tensor<T>> {
    ScaleTransform::default().scale_up(img)
}

/// Open interval accepted for the Post response ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CriteriaThresholds {
    pub ratio_lower: f64,
    pub ratio_upper: f64,
}

impl Default for CriteriaThresholds {
    fn default() -> Self {
        Self {
            ratio_lower: 2.0 / 3.0,
            ratio_upper: 1.5,
        }
    }
}

/// Outcome of both criteria for one channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriteriaVerdict {
    pub addr: BlockAddress,
    pub channel: usize,
    /// `ReLU(Pre_c(X_in))`.
    pub eq1_lhs: f64,
    /// `Pre_c(S(X_in))`, not rectified.
    pub eq1_rhs: f64,
    /// `Post_c(X_in) / Post_c(X_pre)`; `None` when the denominator is zero.
    pub eq2_ratio: Option<f64>,
    pub passes_eq1: bool,
    pub passes_eq2: bool,
    pub passes: bool,
    /// The ratio's denominator was zero.
    pub degenerate: bool,
    /// Visualization or evaluation failure; the channel does not pass.
    pub error: Option<String>,
    /// Fingerprints of the In, Pre and Post visualizations.
    pub fz_fingerprints: [String; 3],
}

/// Raw activations entering the criteria.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriteriaInputs {
    pub pre_on_in: f64,
    pub pre_on_scaled_in: f64,
    pub post_on_in: f64,
    pub post_on_pre: f64,
}

impl CriteriaVerdict {
    pub fn from_inputs(addr: BlockAddress, channel: usize, x: CriteriaInputs, thresholds: &CriteriaThresholds, fz_fingerprints: [String; 3]) -> Self {
        let eq1_lhs = x.pre_on_in.max(0.0);
        let eq1_rhs = x.pre_on_scaled_in;
        let passes_eq1 = eq1_lhs < eq1_rhs;
        let degenerate = x.post_on_pre == 0.0;
        let eq2_ratio = (!degenerate).then(|| x.post_on_in / x.post_on_pre);
        let passes_eq2 = eq2_ratio.is_some_and(|r| thresholds.ratio_lower < r && r < thresholds.ratio_upper);
        Self {
            addr,
            channel,
            eq1_lhs,
            eq1_rhs,
            eq2_ratio,
            passes_eq1,
            passes_eq2,
            passes: passes_eq1 && passes_eq2,
            degenerate,
            error: None,
            fz_fingerprints,
        }
    }

    pub fn failed(addr: BlockAddress, channel: usize, error: String) -> Self {
        Self {
            addr,
            channel,
            eq1_lhs: f64::NAN,
            eq1_rhs: f64::NAN,
            eq2_ratio: None,
            passes_eq1: false,
            passes_eq2: false,
            passes: false,
            degenerate: false,
            error: Some(error),
            fz_fingerprints: Default::default(),
        }
    }
}

/// Center activations of `channel` at Pre and Post for a batch of images.
fn center_pre_post<T: Scalar>(handle: &NetworkHandle<T>, addr: BlockAddress, channel: usize, images: &Tensor<T>) -> Result<(Vec<f64>, Vec<f64>)> {
    let sites = [handle.resolve_tap(addr, TapPoint::Pre)?, handle.resolve_tap(addr, TapPoint::Post)?];
    let maps = handle.observe_many(images, &sites, &[])?;
    let col = |m: &Tensor<T>| (0..images.batch()).map(|b| m.center_value(b, channel).as_f64()).collect();
    Ok((col(&maps[0]), col(&maps[1])))
}

/// Raw criteria activations for In and Pre visualizations of one channel.
pub fn criteria_inputs<T: Scalar>(
    handle: &NetworkHandle<T>,
    addr: BlockAddress,
    channel: usize,
    x_in: &Tensor<T>,
    x_pre: &Tensor<T>,
) -> Result<CriteriaInputs> {
    handle.check_channel(addr, channel)?;
    let scaled = ScaleTransform::for_resolution(handle.input_resolution).scale_up(x_in)?;
    let batch = Tensor::stack(&[x_in.clone(), scaled, x_pre.clone()]);
    let (pre, post) = center_pre_post(handle, addr, channel, &batch)?;
    let inputs = CriteriaInputs {
        pre_on_in: pre[0],
        pre_on_scaled_in: pre[1],
        post_on_in: post[0],
        post_on_pre: post[2],
    };
    if [inputs.pre_on_in, inputs.pre_on_scaled_in, inputs.post_on_in, inputs.post_on_pre].iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("criteria activations for {addr} channel {channel}")));
    }
    Ok(inputs)
}

/// Evaluates both criteria from a channel's In/Pre/Post center-neuron
/// visualizations.
pub fn evaluate_criteria<T: Scalar>(
    handle: &NetworkHandle<T>,
    addr: BlockAddress,
    channel: usize,
    triple: &[FeatureVisual<T>; 3],
    thresholds: &CriteriaThresholds,
) -> Result<CriteriaVerdict> {
    for (fv, tap) in triple.iter().zip(TapPoint::ALL) {
        let o = &fv.objective;
        if o.addr != addr || o.channel != channel || o.tap != tap || o.mode != FzMode::CenterNeuron {
            return Err(Error::Config(format!(
                "visualization for {}:{}:c{} ({:?}) does not belong to {addr}:{tap}:c{channel}",
                o.addr, o.tap, o.channel, o.mode
            )));
        }
    }
    let inputs = criteria_inputs(handle, addr, channel, &triple[0].image, &triple[1].image)?;
    let fps = triple.clone().map(|fv| fv.config_fingerprint);
    Ok(CriteriaVerdict::from_inputs(addr, channel, inputs, thresholds, fps))
}

/// Screens every channel of one block, obtaining triples from `triples`.
/// Failures become non-passing verdicts carrying the error message.
pub fn screen_block_with<T, F>(handle: &NetworkHandle<T>, addr: BlockAddress, thresholds: &CriteriaThresholds, triples: F) -> Result<Vec<CriteriaVerdict>>
where
    T: Scalar,
    F: Fn(BlockAddress, usize) -> Result<[FeatureVisual<T>; 3]> + Sync,
{
    let channels = handle.channels(addr)?;
    Ok((0..channels)
        .into_par_iter()
        .map(|c| {
            let verdict = triples(addr, c).and_then(|t| evaluate_criteria(handle, addr, c, &t, thresholds));
            verdict.unwrap_or_else(|e| {
                tracing::warn!(%addr, channel = c, error = %e, "channel screening failed");
                CriteriaVerdict::failed(addr, c, e.to_string())
            })
        })
        .collect())
}

/// One verdict per channel of every listed block.
pub fn screen_blocks<T: Scalar>(
    handle: &NetworkHandle<T>,
    blocks: &[BlockAddress],
    fz_config: &FzConfig,
    thresholds: &CriteriaThresholds,
) -> Result<Vec<CriteriaVerdict>> {
    for &addr in blocks {
        handle.channels(addr)?;
    }
    let mut out = Vec::new();
    for &addr in blocks {
        out.extend(screen_block_with(handle, addr, thresholds, |a, c| fz_triple(handle, a, c, fz_config))?);
    }
    Ok(out)
}

/// Pass count of one block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassSummary {
    pub addr: BlockAddress,
    pub channels: usize,
    pub passed: usize,
    pub errors: usize,
    pub passing_channels: Vec<usize>,
}

impl PassSummary {
    pub fn fraction(&self) -> f64 {
        self.passed as f64 / self.channels.max(1) as f64
    }
}

/// Per-block pass counts in order of first appearance.
pub fn summarize(verdicts: &[CriteriaVerdict]) -> Vec<PassSummary> {
    let mut out: Vec<PassSummary> = Vec::new();
    for v in verdicts {
        let idx = match out.iter().position(|s| s.addr == v.addr) {
            Some(i) => i,
            None => {
                out.push(PassSummary {
                    addr: v.addr,
                    channels: 0,
                    passed: 0,
                    errors: 0,
                    passing_channels: Vec::new(),
                });
                out.len() - 1
            }
        };
        let s = &mut out[idx];
        s.channels += 1;
        s.errors += usize::from(v.error.is_some());
        if v.passes {
            s.passed += 1;
            s.passing_channels.push(v.channel);
        }
    }
    out
}

#[derive(Debug, Serialize, Deserialize)]
struct VerdictRow {
    block: BlockAddress,
    channel: usize,
    eq1_lhs: f64,
    eq1_rhs: f64,
    eq2_ratio: Option<f64>,
    passes_eq1: bool,
    passes_eq2: bool,
    passes: bool,
    degenerate: bool,
    error: Option<String>,
    fz_in: String,
    fz_pre: String,
    fz_post: String,
}

/// Writes verdicts as CSV, one row per channel.
pub fn write_verdicts(path: &Path, verdicts: &[CriteriaVerdict]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for v in verdicts {
        let [fz_in, fz_pre, fz_post] = v.fz_fingerprints.clone();
        w.serialize(VerdictRow {
            block: v.addr,
            channel: v.channel,
            eq1_lhs: v.eq1_lhs,
            eq1_rhs: v.eq1_rhs,
            eq2_ratio: v.eq2_ratio,
            passes_eq1: v.passes_eq1,
            passes_eq2: v.passes_eq2,
            passes: v.passes,
            degenerate: v.degenerate,
            error: v.error.clone(),
            fz_in,
            fz_pre,
            fz_post,
        })
        .map_err(|e| Error::Config(format!("verdict table: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(format!("verdict table: {e}")))?;
    crate::datahub::write_atomic(path, &bytes)
}

pub fn read_verdicts(path: &Path) -> Result<Vec<CriteriaVerdict>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(bytes.as_slice());
    r.deserialize::<VerdictRow>()
        .map(|row| {
            let row = row.map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            Ok(CriteriaVerdict {
                addr: row.block,
                channel: row.channel,
                eq1_lhs: row.eq1_lhs,
                eq1_rhs: row.eq1_rhs,
                eq2_ratio: row.eq2_ratio,
                passes_eq1: row.passes_eq1,
                passes_eq2: row.passes_eq2,
                passes: row.passes,
                degenerate: row.degenerate,
                error: row.error,
                fz_fingerprints: [row.fz_in, row.fz_pre, row.fz_post],
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn verdict(pre_in: f64, pre_scaled: f64, post_in: f64, post_pre: f64) -> CriteriaVerdict {
        let x = CriteriaInputs {
            pre_on_in: pre_in,
            pre_on_scaled_in: pre_scaled,
            post_on_in: post_in,
            post_on_pre: post_pre,
        };
        CriteriaVerdict::from_inputs(BlockAddress::new(2, 1), 0, x, &CriteriaThresholds::default(), Default::default())
    }

    #[test]
    fn rectified_left_side() {
        let v = verdict(-1.0, 0.5, 1.0, 1.0);
        assert_eq!(v.eq1_lhs, 0.0);
        assert!(v.passes_eq1 && v.passes);
        // Negative right side cannot beat a rectified left side.
        assert!(!verdict(-1.0, -0.5, 1.0, 1.0).passes_eq1);
        assert!(!verdict(0.5, 0.5, 1.0, 1.0).passes_eq1);
    }

    #[test]
    fn ratio_bounds_are_strict() {
        assert_eq!(verdict(0.0, 1.0, 3.2, 3.2).eq2_ratio, Some(1.0));
        assert!(verdict(0.0, 1.0, 3.2, 3.2).passes_eq2);
        assert!(!verdict(0.0, 1.0, 1.5, 1.0).passes_eq2);
        assert!(!verdict(0.0, 1.0, 2.0, 3.0).passes_eq2);
        assert!(verdict(0.0, 1.0, 1.49, 1.0).passes_eq2);
    }

    #[test]
    fn zero_denominator_is_degenerate() {
        let v = verdict(0.0, 1.0, 1.0, 0.0);
        assert!(v.degenerate && !v.passes_eq2 && !v.passes && v.eq2_ratio.is_none());
    }

    #[test]
    fn scale_up_rejects_wrong_resolution() {
        let img = Tensor::<f32>::zeros([1, 3, 100, 100]);
        assert!(matches!(scale_up(&img), Err(Error::Resolution { expected: 224, .. })));
    }

    #[test]
    fn verdict_table_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.csv");
        let mut a = verdict(-1.0, 0.5, 1.0, 1.0);
        a.fz_fingerprints = ["a".into(), "b".into(), "c".into()];
        let b = verdict(0.0, 1.0, 1.0, 0.0);
        let c = CriteriaVerdict::failed(BlockAddress::new(3, 1), 7, "boom, with comma".into());
        write_verdicts(&path, &[a.clone(), b.clone(), c.clone()]).unwrap();
        let back = read_verdicts(&path).unwrap();
        assert_eq!(back[0], a);
        assert_eq!(back[1], b);
        assert_eq!(back[2].error, c.error);
        assert!(back[2].eq1_lhs.is_nan());
    }

    #[test]
    fn summary_counts() {
        let mut vs = vec![verdict(0.0, 1.0, 1.0, 1.0), verdict(1.0, 0.0, 1.0, 1.0)];
        vs[1].channel = 1;
        let s = summarize(&vs);
        assert_eq!(s.len(), 1);
        assert_eq!((s[0].channels, s[0].passed), (2, 1));
        assert_eq!(s[0].passing_channels, vec![0]);
        assert_eq!(s[0].fraction(), 0.5);
    }
}
