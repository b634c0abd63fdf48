// SPDX-License-Identifier: MIT OR Apache-2.0

//! Feature visualization: synthesize images that maximize a center neuron
//! (or a whole channel) at a tap point, by Adam ascent on a parameterized
//! image through a stochastic regularization stack.

pub mod param;
pub mod transforms;

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use param::{ImageParam, Parameterization};
pub use transforms::{JitterPair, TransformStack};

use crate::error::{Error, Result};
use crate::netgraph::{center_objective, channel_objective, BlockAddress, NetworkHandle, TapPoint};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FzMode {
    CenterNeuron,
    WholeChannel,
}

impl FzMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FzMode::CenterNeuron => "center",
            FzMode::WholeChannel => "channel",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FzObjective {
    pub addr: BlockAddress,
    pub tap: TapPoint,
    pub channel: usize,
    pub mode: FzMode,
}

impl FzObjective {
    pub fn center(addr: BlockAddress, tap: TapPoint, channel: usize) -> Self {
        Self {
            addr,
            tap,
            channel,
            mode: FzMode::CenterNeuron,
        }
    }

    /// Objective value on an activation map (center neuron or spatial mean).
    pub fn evaluate<T: Scalar>(&self, map: &Tensor<T>) -> T {
        match self.mode {
            FzMode::CenterNeuron => map.center_value(0, self.channel),
            FzMode::WholeChannel => map.channel_mean(0, self.channel),
        }
    }

    fn describe(&self) -> String {
        format!("{}:{}:c{}:{}", self.addr, self.tap, self.channel, self.mode.as_str())
    }
}

/// Per-block jitter schedule: none for blocks 1.1 and 2.0, 4 pixels for
/// 2.1 Pre and all of block 3.0, and 16 pixels everywhere else.
pub fn jitter_for_block(addr: BlockAddress, tap: TapPoint) -> usize {
    match (addr.stage, addr.block, tap) {
        (1, 1, _) | (2, 0, _) => 0,
        (2, 1, TapPoint::Pre) | (3, 0, _) => 4,
        _ => 16,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FzConfig {
    pub steps: usize,
    pub step_size: f64,
    /// Overrides the per-block jitter schedule when set.
    pub jitter_override: Option<usize>,
    pub parameterization: Parameterization,
    pub seed: u64,
    /// Side length of the optimized image; the network's input resolution
    /// when unset.
    pub image_size: Option<usize>,
    pub transforms: TransformStack,
}

impl Default for FzConfig {
    fn default() -> Self {
        Self {
            steps: 512,
            step_size: 0.05,
            jitter_override: None,
            parameterization: Parameterization::SpectralDecorrelated,
            seed: 0,
            image_size: None,
            transforms: TransformStack::default(),
        }
    }
}

impl FzConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("fz steps must be at least 1".into()));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config("fz step_size must be positive".into()));
        }
        Ok(())
    }

    pub fn jitter(&self, addr: BlockAddress, tap: TapPoint) -> JitterPair {
        JitterPair::from_primary(self.jitter_override.unwrap_or_else(|| jitter_for_block(addr, tap)))
    }
}

/// An optimized image with the activation it achieves.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVisual<T> {
    /// `[1, C, H, W]` in `[0, 1]`.
    pub image: Tensor<T>,
    pub objective: FzObjective,
    /// Objective on the final image through the clean, untransformed network.
    pub achieved_activation: T,
    /// Objective on the initial image, for progress accounting.
    pub initial_activation: T,
    pub jitter: JitterPair,
    pub job_seed: u64,
    pub config_fingerprint: String,
}

/// Persisted metadata of a [`FeatureVisual`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FzRecord {
    pub weights_id: String,
    pub objective: FzObjective,
    pub achieved_activation: f64,
    pub initial_activation: f64,
    pub jitter: JitterPair,
    pub job_seed: u64,
    pub config_fingerprint: String,
    pub shape: [usize; 4],
    pub dtype: String,
}

fn digest_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn job_seed(seed: u64, objective: &FzObjective) -> u64 {
    let d = Sha256::digest(format!("{seed}|{}", objective.describe()).as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Fingerprint of everything that determines an optimization's result.
pub fn config_fingerprint(weights_id: &str, objective: &FzObjective, config: &FzConfig, jitter: JitterPair) -> String {
    let payload = serde_json::json!({
        "weights_id": weights_id,
        "objective": objective,
        "config": config,
        "jitter": jitter,
    });
    digest_hex(payload.to_string().as_bytes())[..16].to_string()
}

/// Objective value of `image` at the objective's site, without transforms.
pub fn evaluate_objective<T: Scalar>(handle: &NetworkHandle<T>, objective: &FzObjective, image: &Tensor<T>) -> Result<T> {
    let site = handle.resolve_tap(objective.addr, objective.tap)?;
    let map = handle.observe(image, site, &[])?;
    Ok(objective.evaluate(&map))
}

struct Adam<T> {
    lr: T,
    beta1: T,
    beta2: T,
    eps: T,
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
}

impl<T: Scalar> Adam<T> {
    fn new(len: usize, lr: f64) -> Self {
        Self {
            lr: T::lit(lr),
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            t: 0,
        }
    }

    /// One descent step on `params` for loss gradient `grad`.
    fn step(&mut self, params: &mut [T], grad: &[T]) {
        self.t += 1;
        let bc1 = T::one() - self.beta1.powi(self.t);
        let bc2 = T::one() - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (T::one() - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (T::one() - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] = params[i] - self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Optimizes an image for `objective`.
///
/// Fails with [`Error::NonFinite`] if the objective becomes non-finite and
/// with [`Error::DegenerateObjective`] if the image gradient is zero at every
/// step.
pub fn optimize_fz<T: Scalar>(handle: &NetworkHandle<T>, objective: FzObjective, config: &FzConfig) -> Result<FeatureVisual<T>> {
    config.validate()?;
    handle.check_channel(objective.addr, objective.channel)?;
    let site = handle.resolve_tap(objective.addr, objective.tap)?;
    let size = config.image_size.unwrap_or(handle.input_resolution);
    let jitter = config.jitter(objective.addr, objective.tap);
    let seed = job_seed(config.seed, &objective);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut param = ImageParam::<T>::new(config.parameterization, size, size, seed);
    let initial_activation = evaluate_objective(handle, &objective, &param.image())?;

    let mut adam = Adam::new(param.params.len(), config.step_size);
    let mut saw_gradient = false;
    for step in 0..config.steps {
        let (img, cache) = param.render();
        let (x, tape) = config.transforms.apply(&img, jitter, &mut rng);
        let (value, g_x) = match objective.mode {
            FzMode::CenterNeuron => handle.site_gradient(&x, site, center_objective(objective.channel))?,
            FzMode::WholeChannel => handle.site_gradient(&x, site, channel_objective(objective.channel))?,
        };
        if !value.is_finite() || !g_x.all_finite() {
            return Err(Error::NonFinite(format!("{} at step {step}: activation {value}", objective.describe())));
        }
        let g_img = tape.backward(&g_x);
        // Ascent on the activation is descent on its negation.
        let grad: Vec<T> = param.backward(&cache, &g_img).into_iter().map(|g| -g).collect();
        if grad.iter().any(|g| *g != T::zero()) {
            saw_gradient = true;
        }
        adam.step(&mut param.params, &grad);
    }
    if !saw_gradient {
        return Err(Error::DegenerateObjective(objective.describe()));
    }
    let image = param.image();
    let achieved_activation = evaluate_objective(handle, &objective, &image)?;
    if !achieved_activation.is_finite() {
        return Err(Error::NonFinite(format!("{}: final activation", objective.describe())));
    }
    Ok(FeatureVisual {
        image,
        objective,
        achieved_activation,
        initial_activation,
        jitter,
        job_seed: seed,
        config_fingerprint: config_fingerprint(&handle.weights_id, &objective, config, jitter),
    })
}

/// Center-neuron visualizations for the In, Pre and Post taps of one
/// channel, each with its tap's jitter.
pub fn fz_triple<T: Scalar>(
    handle: &NetworkHandle<T>,
    addr: BlockAddress,
    channel: usize,
    config: &FzConfig,
) -> Result<[FeatureVisual<T>; 3]> {
    handle.check_channel(addr, channel)?;
    let run = |tap| optimize_fz(handle, FzObjective::center(addr, tap, channel), config);
    Ok([run(TapPoint::In)?, run(TapPoint::Pre)?, run(TapPoint::Post)?])
}

/// File stem encoding block, tap, channel, mode and seed, plus a caller tag
/// (typically a config hash).
pub fn fz_file_stem(objective: &FzObjective, seed: u64, tag: &str) -> String {
    format!(
        "fz_b{}_{}_c{}_{}_s{}_{}",
        objective.addr,
        objective.tap,
        objective.channel,
        objective.mode.as_str(),
        seed,
        tag
    )
}

/// Paths written by [`save_feature_visual`].
#[derive(Debug, Clone)]
pub struct FzFiles {
    pub png: PathBuf,
    pub meta: PathBuf,
    pub raw: PathBuf,
}

impl FzFiles {
    pub fn at(dir: &Path, stem: &str) -> Self {
        Self {
            png: dir.join(format!("{stem}.png")),
            meta: dir.join(format!("{stem}.json")),
            raw: dir.join(format!("{stem}.bin")),
        }
    }

    pub fn exist(&self) -> bool {
        self.png.exists() && self.meta.exists() && self.raw.exists()
    }
}

/// Writes an `[1, 3, H, W]` `[0, 1]` image as a 16-bit RGB PNG.
pub fn write_png16<T: Scalar>(image: &Tensor<T>, path: &Path) -> Result<()> {
    let (h, w) = (image.height(), image.width());
    let mut buf = image::ImageBuffer::<image::Rgb<u16>, Vec<u16>>::new(w as u32, h as u32);
    for (x, y, px) in buf.enumerate_pixels_mut() {
        for c in 0..3 {
            let v = image.at(0, c.min(image.channels() - 1), y as usize, x as usize).as_f64();
            px.0[c] = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        }
    }
    buf.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Persists the image (lossless PNG plus exact raw values) and metadata.
pub fn save_feature_visual<T: Scalar>(fv: &FeatureVisual<T>, weights_id: &str, dir: &Path, tag: &str, seed: u64) -> Result<FzFiles> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = FzFiles::at(dir, &fz_file_stem(&fv.objective, seed, tag));
    write_png16(&fv.image, &files.png)?;
    let mut raw = Vec::with_capacity(fv.image.data().len() * T::BYTES);
    fv.image.data().iter().for_each(|v| v.write_le(&mut raw));
    crate::datahub::write_atomic(&files.raw, &raw)?;
    let record = FzRecord {
        weights_id: weights_id.to_string(),
        objective: fv.objective,
        achieved_activation: fv.achieved_activation.as_f64(),
        initial_activation: fv.initial_activation.as_f64(),
        jitter: fv.jitter,
        job_seed: fv.job_seed,
        config_fingerprint: fv.config_fingerprint.clone(),
        shape: fv.image.shape(),
        dtype: T::DTYPE.to_string(),
    };
    let json = serde_json::to_vec_pretty(&record).map_err(|e| Error::Cache(e.to_string()))?;
    crate::datahub::write_atomic(&files.meta, &json)?;
    Ok(files)
}

pub fn load_feature_visual<T: Scalar>(files: &FzFiles) -> Result<(FeatureVisual<T>, FzRecord)> {
    let meta = std::fs::read(&files.meta).map_err(|e| Error::io(&files.meta, e))?;
    let record: FzRecord = serde_json::from_slice(&meta).map_err(|e| Error::Cache(format!("{}: {e}", files.meta.display())))?;
    if record.dtype != T::DTYPE {
        return Err(Error::Cache(format!("{} stores {}, requested {}", files.raw.display(), record.dtype, T::DTYPE)));
    }
    let raw = std::fs::read(&files.raw).map_err(|e| Error::io(&files.raw, e))?;
    let n: usize = record.shape.iter().product();
    if raw.len() != n * T::BYTES {
        return Err(Error::Cache(format!("{} has {} bytes, expected {}", files.raw.display(), raw.len(), n * T::BYTES)));
    }
    let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
    let fv = FeatureVisual {
        image: Tensor::from_vec(record.shape, data),
        objective: record.objective,
        achieved_activation: T::lit(record.achieved_activation),
        initial_activation: T::lit(record.initial_activation),
        jitter: record.jitter,
        job_seed: record.job_seed,
        config_fingerprint: record.config_fingerprint.clone(),
    };
    Ok((fv, record))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jitter_schedule_table() {
        let b = BlockAddress::new;
        for tap in TapPoint::ALL {
            assert_eq!(jitter_for_block(b(1, 1), tap), 0);
            assert_eq!(jitter_for_block(b(2, 0), tap), 0);
            assert_eq!(jitter_for_block(b(3, 0), tap), 4);
            assert_eq!(jitter_for_block(b(1, 0), tap), 16);
            assert_eq!(jitter_for_block(b(3, 1), tap), 16);
            for blk in 0..2 {
                assert_eq!(jitter_for_block(b(4, blk), tap), 16);
            }
        }
        assert_eq!(jitter_for_block(b(2, 1), TapPoint::Pre), 4);
        assert_eq!(jitter_for_block(b(2, 1), TapPoint::In), 16);
        assert_eq!(jitter_for_block(b(2, 1), TapPoint::Post), 16);
    }

    #[test]
    fn config_validation() {
        assert!(FzConfig::default().validate().is_ok());
        assert!(FzConfig { steps: 0, ..FzConfig::default() }.validate().is_err());
        assert!(FzConfig { step_size: 0.0, ..FzConfig::default() }.validate().is_err());
    }

    #[test]
    fn defaults_follow_recipe() {
        let c = FzConfig::default();
        assert_eq!(c.steps, 512);
        assert_eq!(c.step_size, 0.05);
        assert_eq!(c.parameterization, Parameterization::SpectralDecorrelated);
        let j = c.jitter(BlockAddress::new(3, 1), TapPoint::In);
        assert_eq!((j.primary, j.secondary), (16, 8));
    }

    #[test]
    fn file_stem_encodes_objective() {
        let o = FzObjective::center(BlockAddress::new(2, 1), TapPoint::Pre, 15);
        assert_eq!(fz_file_stem(&o, 3, "abc"), "fz_b2.1_pre_c15_center_s3_abc");
    }
}
