// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use resscale::ablate::{post_center_means, run_ablation_experiment, AblationReport};
use resscale::config::PipelineConfig;
use resscale::datahub::{cached_center_activations, canonical_for, load_dataset, top_k_activating_images, write_atomic, DatasetSlice};
use resscale::featviz::{config_fingerprint, fz_file_stem, load_feature_visual, optimize_fz, save_feature_visual, FeatureVisual, FzFiles, FzMode, FzObjective};
use resscale::netgraph::Registry;
use resscale::report::{render_channel_grid, render_ratio_plot, ChannelGrid, GridCell, RatioPlotSpec};
use resscale::scalecrit::{read_verdicts, screen_block_with, summarize, write_verdicts, CriteriaVerdict, PassSummary};
use resscale::{BlockAddress, NetworkHandle, TapPoint, Tensor};
use serde_json::json;

use crate::args::{Cli, Command};

/// Production precision of the pipeline.
type Real = f32;

const MOSAIC_SIZE: usize = 9;

/// A problem with how the tool was invoked rather than with the run.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(message: impl Into<String>) -> anyhow::Error {
    UsageError(message.into()).into()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Completion {
    Full,
    Partial,
}

/// Merges `patch` into `base`, replacing non-table values.
fn merge(base: &mut toml::Table, patch: toml::Table) {
    for (key, value) in patch {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(p)) => merge(b, p),
            (_, value) => {
                base.insert(key, value);
            }
        }
    }
}

/// Parses `key.path=value`. The value is read as TOML and falls back to a
/// plain string, so `--set weights_id=random:resnet18:0` needs no quotes.
fn parse_override(raw: &str) -> resscale::Result<toml::Table> {
    let bad = |m: String| resscale::Error::Config(format!("--set {raw}: {m}"));
    let (key, value) = raw.split_once('=').ok_or_else(|| bad("expected KEY=VALUE".into()))?;
    let (key, value) = (key.trim(), value.trim());
    if key.is_empty() {
        return Err(bad("empty key".into()));
    }
    toml::from_str(&format!("{key} = {value}")).or_else(|_| {
        let quoted = toml::Value::String(value.to_string());
        toml::from_str(&format!("{key} = {quoted}")).map_err(|e| bad(e.message().to_string()))
    })
}

/// Effective configuration: file (or defaults) plus overrides.
pub fn effective_config(path: Option<&Path>, overrides: &[String]) -> resscale::Result<PipelineConfig> {
    let base = match path {
        Some(p) => PipelineConfig::from_file(p)?,
        None => PipelineConfig::default(),
    };
    if overrides.is_empty() {
        return Ok(base);
    }
    let mut table = toml::Table::try_from(&base).map_err(|e| resscale::Error::Config(e.to_string()))?;
    for raw in overrides {
        merge(&mut table, parse_override(raw)?);
    }
    let cfg: PipelineConfig = table.try_into().map_err(|e: toml::de::Error| resscale::Error::Config(e.message().to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub struct Pipeline {
    pub config: PipelineConfig,
    screen_blocks: Vec<BlockAddress>,
    ablate_blocks: Vec<BlockAddress>,
    print: bool,
}

impl Pipeline {
    pub fn from_cli(cli: &Cli) -> anyhow::Result<Self> {
        let config = effective_config(cli.config.as_deref(), &cli.overrides)?;
        let mut screen_blocks = config.screen.blocks.clone();
        let mut ablate_blocks = config.ablate.blocks.clone();
        match &cli.command {
            Command::Screen { blocks: Some(b) } => screen_blocks = b.clone(),
            Command::Ablate { blocks: Some(b) } => ablate_blocks = b.clone(),
            _ => {}
        }
        let pipeline = Self {
            config,
            screen_blocks,
            ablate_blocks,
            print: cli.print,
        };
        pipeline.record_config()?;
        Ok(pipeline)
    }

    fn out(&self, sub: &str) -> anyhow::Result<PathBuf> {
        let dir = self.config.output_root.join(sub);
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(dir)
    }

    fn record_config(&self) -> anyhow::Result<()> {
        std::fs::create_dir_all(&self.config.output_root).with_context(|| format!("creating {}", self.config.output_root.display()))?;
        let path = self.config.output_root.join(format!("config_{}.toml", self.config.hash()));
        if !path.exists() {
            write_atomic(&path, self.config.to_toml()?.as_bytes())?;
        }
        tracing::debug!(path = %path.display(), "effective config recorded");
        Ok(())
    }

    fn network(&self) -> anyhow::Result<NetworkHandle<Real>> {
        Registry::from_env().load(&self.config.weights_id).with_context(|| format!("loading network `{}`", self.config.weights_id))
    }

    fn dataset(&self) -> anyhow::Result<DatasetSlice> {
        let d = &self.config.dataset;
        let root = d.root.as_ref().ok_or_else(|| usage("dataset.root is not set; pass it in the config or with --set dataset.root=<dir>"))?;
        Ok(load_dataset(root, d.subset_fraction, d.split_seed)?)
    }

    fn fz_files(&self, objective: &FzObjective) -> anyhow::Result<FzFiles> {
        let stem = fz_file_stem(objective, self.config.fz.seed, &self.config.fz_hash());
        Ok(FzFiles::at(&self.out("fz")?, &stem))
    }

    fn verdict_path(&self, addr: BlockAddress) -> PathBuf {
        self.config.output_root.join("screen").join(format!("verdicts_b{addr}_{}.csv", self.config.screen_hash()))
    }

    fn ablation_paths(&self, addr: BlockAddress) -> (PathBuf, PathBuf) {
        let stem = format!("ablation_b{addr}_{}", self.config.ablate_hash(addr));
        let dir = self.config.output_root.join("ablate");
        (dir.join(format!("{stem}.json")), dir.join(format!("{stem}.csv")))
    }

    /// Stored visualization when it exists and was produced by the current
    /// settings, otherwise a fresh optimization that is then stored.
    fn feature_visual(&self, handle: &NetworkHandle<Real>, objective: FzObjective) -> resscale::Result<FeatureVisual<Real>> {
        let stem = fz_file_stem(&objective, self.config.fz.seed, &self.config.fz_hash());
        let dir = self.config.output_root.join("fz");
        let files = FzFiles::at(&dir, &stem);
        if files.exist() {
            let expected = config_fingerprint(&self.config.weights_id, &objective, &self.config.fz, self.config.fz.jitter(objective.addr, objective.tap));
            match load_feature_visual::<Real>(&files) {
                Ok((fv, record)) if record.config_fingerprint == expected && record.weights_id == self.config.weights_id => return Ok(fv),
                Ok(_) => tracing::warn!(file = %files.meta.display(), "stored visualization has a different fingerprint; recomputing"),
                Err(e) => tracing::warn!(file = %files.meta.display(), error = %e, "stored visualization unreadable; recomputing"),
            }
        }
        let fv = optimize_fz(handle, objective, &self.config.fz)?;
        save_feature_visual(&fv, &self.config.weights_id, &dir, &self.config.fz_hash(), self.config.fz.seed)?;
        Ok(fv)
    }

    fn emit(&self, value: serde_json::Value) -> anyhow::Result<()> {
        if self.print {
            println!("{}", serde_json::to_string_pretty(&value)?);
        }
        Ok(())
    }

    pub fn visualize(&self, addr: BlockAddress, channel: usize) -> anyhow::Result<Completion> {
        let handle = self.network()?;
        handle.check_channel(addr, channel)?;
        self.out("fz")?;
        let mut written = Vec::new();
        for mode in [FzMode::CenterNeuron, FzMode::WholeChannel] {
            for tap in TapPoint::ALL {
                let objective = FzObjective { addr, tap, channel, mode };
                let fv = self.feature_visual(&handle, objective).with_context(|| format!("visualizing {addr} {tap} channel {channel} ({})", mode.as_str()))?;
                let files = self.fz_files(&objective)?;
                tracing::info!(%addr, %tap, channel, mode = mode.as_str(), activation = fv.achieved_activation, file = %files.png.display(), "visualization ready");
                written.push(json!({
                    "tap": tap.as_str(),
                    "mode": mode.as_str(),
                    "activation": fv.achieved_activation,
                    "png": files.png,
                }));
            }
        }
        self.emit(json!({ "block": addr, "channel": channel, "fz_hash": self.config.fz_hash(), "visualizations": written }))?;
        Ok(Completion::Full)
    }

    fn stored_verdicts(&self, addr: BlockAddress, channels: usize) -> Option<Vec<CriteriaVerdict>> {
        let path = self.verdict_path(addr);
        if !path.exists() {
            return None;
        }
        match read_verdicts(&path) {
            Ok(v) if v.len() == channels && v.iter().enumerate().all(|(i, r)| r.addr == addr && r.channel == i) => Some(v),
            Ok(_) => {
                tracing::warn!(path = %path.display(), "stored verdicts do not cover the block; rescreening");
                None
            }
            Err(e) => {
                tracing::warn!(path = %path.display(), error = %e, "stored verdicts unreadable; rescreening");
                None
            }
        }
    }

    pub fn screen(&self) -> anyhow::Result<Completion> {
        if self.screen_blocks.is_empty() {
            return Err(usage("no blocks to screen; set screen.blocks or pass --blocks"));
        }
        let handle = self.network()?;
        for &addr in &self.screen_blocks {
            handle.channels(addr)?;
        }
        let dir = self.out("screen")?;
        self.out("fz")?;
        let thresholds = &self.config.screen.thresholds;
        let mut summaries: Vec<PassSummary> = Vec::new();
        for &addr in &self.screen_blocks {
            let verdicts = match self.stored_verdicts(addr, handle.channels(addr)?) {
                Some(v) => {
                    tracing::info!(%addr, "reusing stored verdicts");
                    v
                }
                None => {
                    tracing::info!(%addr, channels = handle.channels(addr)?, "screening block");
                    let v = screen_block_with(&handle, addr, thresholds, |a, c| {
                        let fv = |tap| self.feature_visual(&handle, FzObjective::center(a, tap, c));
                        Ok([fv(TapPoint::In)?, fv(TapPoint::Pre)?, fv(TapPoint::Post)?])
                    })?;
                    write_verdicts(&self.verdict_path(addr), &v)?;
                    v
                }
            };
            let summary = summarize(&verdicts).remove(0);
            tracing::info!(
                "block {addr}: {} of {} channels pass ({:.1}%)",
                summary.passed,
                summary.channels,
                100.0 * summary.fraction()
            );
            if summary.errors > 0 {
                tracing::warn!(%addr, errors = summary.errors, "some channels could not be visualized and count as failing");
            }
            // Whole-channel visualizations of the passers complete their
            // report grids.
            for &c in &summary.passing_channels {
                for tap in TapPoint::ALL {
                    let objective = FzObjective { addr, tap, channel: c, mode: FzMode::WholeChannel };
                    if let Err(e) = self.feature_visual(&handle, objective) {
                        tracing::warn!(%addr, %tap, channel = c, error = %e, "whole-channel visualization failed");
                    }
                }
            }
            summaries.push(summary);
        }
        let summary_path = dir.join(format!("summary_{}.csv", self.config.screen_hash()));
        let mut text = String::from("block,channels,passed,errors,pass_percent,passing_channels\n");
        for s in &summaries {
            let list: Vec<String> = s.passing_channels.iter().map(usize::to_string).collect();
            text.push_str(&format!("{},{},{},{},{:.1},{}\n", s.addr, s.channels, s.passed, s.errors, 100.0 * s.fraction(), list.join(" ")));
        }
        write_atomic(&summary_path, text.as_bytes())?;
        tracing::info!(path = %summary_path.display(), "screening summary written");
        self.emit(json!({ "screen_hash": self.config.screen_hash(), "blocks": summaries }))?;
        Ok(Completion::Full)
    }

    fn passing_channels(&self, addr: BlockAddress) -> anyhow::Result<BTreeSet<usize>> {
        let path = self.verdict_path(addr);
        if !path.exists() {
            bail!("no screening verdicts for block {addr} at {}; run `resscale screen` first", path.display());
        }
        let verdicts = read_verdicts(&path)?;
        Ok(verdicts.iter().filter(|v| v.passes).map(|v| v.channel).collect())
    }

    pub fn ablate(&self) -> anyhow::Result<Completion> {
        if self.ablate_blocks.is_empty() {
            return Err(usage("no blocks to ablate; set ablate.blocks or pass --blocks"));
        }
        let passing: Vec<BTreeSet<usize>> = self.ablate_blocks.iter().map(|&a| self.passing_channels(a)).collect::<anyhow::Result<_>>()?;
        let slice = self.dataset()?;
        let handle = self.network()?;
        self.out("ablate")?;
        let cache = self.config.cache_dir();
        let mut results = Vec::new();
        for (&addr, passing) in self.ablate_blocks.iter().zip(passing) {
            let (json_path, csv_path) = self.ablation_paths(addr);
            let stored = json_path.exists().then(|| AblationReport::read_json(&json_path));
            let report = match stored {
                Some(Ok(r)) if r.weights_id == handle.weights_id && r.addr == addr => {
                    tracing::info!(%addr, path = %json_path.display(), "reusing stored ablation report");
                    r
                }
                other => {
                    if let Some(Err(e)) = other {
                        tracing::warn!(path = %json_path.display(), error = %e, "stored report unreadable; rerunning");
                    }
                    tracing::info!(%addr, passing = passing.len(), images = slice.image_count(), "running ablation experiment");
                    let means = post_center_means(&handle, &slice, addr, self.config.dataset.batch_size, Some(&cache))?;
                    let r = run_ablation_experiment(&handle, &slice, addr, &passing, &means, &self.config.ablation_config(addr))?;
                    r.write_json(&json_path)?;
                    r
                }
            };
            if !csv_path.exists() {
                report.write_csv(&csv_path)?;
            }
            for (&p, ratio) in &report.ratios {
                tracing::info!(%addr, percentage = p, ratio, "mean ablation ratio");
            }
            tracing::info!(%addr, ratio = report.no_scale_ratio, "no-scale ratio");
            results.push(json!({
                "block": addr,
                "report": json_path,
                "no_scale_ratio": report.no_scale_ratio,
                "ratios": report.ratios,
                "standard_errors": report.ratio_standard_errors,
            }));
        }
        self.emit(json!({ "ablations": results }))?;
        Ok(Completion::Full)
    }

    fn fz_cell(&self, objective: FzObjective) -> GridCell<Real> {
        let files = match self.fz_files(&objective) {
            Ok(f) => f,
            Err(e) => return GridCell::Missing(e.to_string()),
        };
        if !files.exist() {
            return GridCell::Missing(format!("{} visualization {}", objective.mode.as_str(), files.png.display()));
        }
        match load_feature_visual::<Real>(&files) {
            Ok((fv, _)) => GridCell::Image(fv.image),
            Err(e) => GridCell::Missing(e.to_string()),
        }
    }

    fn mosaic_cell(&self, handle: &NetworkHandle<Real>, slice: &DatasetSlice, addr: BlockAddress, tap: TapPoint, channel: usize) -> resscale::Result<GridCell<Real>> {
        let cache = cached_center_activations(handle, slice, addr, tap, None, self.config.dataset.batch_size, &self.config.cache_dir())?;
        let k = MOSAIC_SIZE.min(slice.image_count());
        let ranked = top_k_activating_images(&cache, channel, k)?;
        if k < MOSAIC_SIZE {
            return Ok(GridCell::Missing(format!("top-{MOSAIC_SIZE} images: slice holds only {k}")));
        }
        let transform = canonical_for(handle);
        let images: Vec<Tensor<Real>> = ranked.iter().map(|r| slice.load_batch(&[r.index], &transform)).collect::<resscale::Result<_>>()?;
        Ok(GridCell::Mosaic(images))
    }

    pub fn report(&self) -> anyhow::Result<Completion> {
        let mut missing = Vec::new();
        let mut passers = Vec::new();
        for &addr in &self.screen_blocks {
            let path = self.verdict_path(addr);
            if path.exists() {
                passers.extend(self.passing_channels(addr)?.into_iter().map(|c| (addr, c)));
            } else {
                missing.push(format!("verdicts for block {addr} ({})", path.display()));
            }
        }
        let mut reports = Vec::new();
        for &addr in &self.ablate_blocks {
            let (path, _) = self.ablation_paths(addr);
            if path.exists() {
                reports.push(AblationReport::read_json(&path)?);
            } else {
                missing.push(format!("ablation report for block {addr} ({})", path.display()));
            }
        }
        let screened = self.screen_blocks.iter().any(|&a| self.verdict_path(a).exists());
        if !screened && reports.is_empty() {
            bail!("nothing to report; missing inputs:\n  {}", missing.join("\n  "));
        }
        for m in &missing {
            tracing::warn!("missing input: {m}");
        }

        let dir = self.out("report")?;
        let mut warnings = missing.len();
        let mut figures = Vec::new();
        for r in &reports {
            let stem = format!("ratio_b{}_{}", r.addr, self.config.ablate_hash(r.addr));
            let (svg, csv) = (dir.join(format!("{stem}.svg")), dir.join(format!("{stem}.csv")));
            render_ratio_plot(&RatioPlotSpec::from_report(r, self.config.report.trial_scatter)?, &svg, &csv)?;
            tracing::info!(block = %r.addr, path = %svg.display(), "ratio plot written");
            figures.push(svg);
        }

        // Top-9 rows need the network and the dataset; without them the
        // grids still render with placeholders.
        let natural = match (self.dataset(), self.network()) {
            (Ok(slice), Ok(handle)) => Ok((slice, handle)),
            (Err(e), _) | (_, Err(e)) => Err(format!("top-{MOSAIC_SIZE} images unavailable: {e:#}")),
        };
        for &(addr, channel) in &passers {
            let fz_row = |mode| TapPoint::ALL.map(|tap| self.fz_cell(FzObjective { addr, tap, channel, mode }));
            let mosaic_row = TapPoint::ALL.map(|tap| match &natural {
                Ok((slice, handle)) => self.mosaic_cell(handle, slice, addr, tap, channel).unwrap_or_else(|e| GridCell::Missing(e.to_string())),
                Err(e) => GridCell::Missing(e.clone()),
            });
            let grid = ChannelGrid {
                addr,
                channel,
                cells: [fz_row(FzMode::CenterNeuron), fz_row(FzMode::WholeChannel), mosaic_row],
            };
            let path = dir.join(format!("grid_b{addr}_c{channel}_{}.png", self.config.screen_hash()));
            let outcome = render_channel_grid(&grid, self.config.report.layout, &path)?;
            warnings += outcome.warnings.len();
            figures.push(path);
        }
        tracing::info!(figures = figures.len(), warnings, "report rendered");
        self.emit(json!({ "figures": figures, "warnings": warnings, "missing": missing }))?;
        Ok(if warnings == 0 { Completion::Full } else { Completion::Partial })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_merge_into_nested_tables() {
        let cfg = effective_config(
            None,
            &[
                "dataset.subset_fraction=0.05".into(),
                "weights_id=random:resnet-mini:3".into(),
                "ablate.relaxation.\"2.1\"=0.02".into(),
                "fz.transforms.enabled=false".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.dataset.subset_fraction, 0.05);
        assert_eq!(cfg.weights_id, "random:resnet-mini:3");
        assert_eq!(cfg.relaxation_for(BlockAddress::new(2, 1)), 0.02);
        assert!(!cfg.fz.transforms.enabled);
        assert_eq!(cfg.ablate.trials, PipelineConfig::default().ablate.trials);
        assert_ne!(cfg.hash(), PipelineConfig::default().hash());
    }

    #[test]
    fn bad_overrides_are_config_errors() {
        for raw in ["no_equals", "=3", "dataset.subset_fraction=2.0", "colour=1", "dataset.batch_size=\"x\""] {
            assert!(matches!(effective_config(None, &[raw.into()]), Err(resscale::Error::Config(_))), "{raw}");
        }
    }
}
