// SPDX-License-Identifier: MIT OR Apache-2.0

//! Checks against synthetic networks whose answers are known in closed form.

use anyhow::{ensure, Context};
use resscale::ablate::{aggregate_ratio, apply_mean_ablation, eval_scale_crop_size, evaluate_accuracy_prepared, AblatedNetwork, AblationSpec, PreparedImages};
use resscale::featviz::{FzConfig, TransformStack};
use resscale::netgraph::synthetic::{center_classifier, SyntheticSpec};
use resscale::netgraph::Preprocess;
use resscale::scalecrit::{screen_blocks, CriteriaThresholds, ScaleTransform};
use resscale::{BlockAddress, NetworkHandle, TapPoint, Tensor};
use serde_json::json;

use crate::pipeline::Completion;

type Check = (&'static str, fn() -> anyhow::Result<String>);

const CHECKS: [Check; 4] = [
    ("scale transform", scale_transform),
    ("planted screening", planted_screening),
    ("toy ablation", toy_ablation),
    ("ratio arithmetic", ratio_arithmetic),
];

fn scale_transform() -> anyhow::Result<String> {
    for (p, want) in [(0, 256), (10, 231), (30, 180), (50, 128)] {
        ensure!(eval_scale_crop_size(p) == want, "crop size at {p}% is {}, expected {want}", eval_scale_crop_size(p));
    }
    // Constant images stay constant; a linear ramp keeps its center value
    // and doubles its slope.
    let transform = ScaleTransform::for_resolution(16);
    let flat = Tensor::<f64>::from_fn([1, 3, 16, 16], |_, c, _, _| 0.2 + 0.3 * c as f64);
    let scaled = transform.scale_up(&flat)?;
    ensure!(scaled.data().iter().zip(flat.data()).all(|(a, b)| (a - b).abs() < 1e-12), "scaling changed a constant image");
    let ramp = Tensor::<f64>::from_fn([1, 1, 16, 16], |_, _, _, x| x as f64);
    let up = transform.scale_up(&ramp)?;
    for x in 2..14 {
        let want = 7.5 + (x as f64 - 7.5) / 2.0;
        ensure!((up.at(0, 0, 5, x) - want).abs() < 1e-12, "ramp at column {x} is {}, expected {want}", up.at(0, 0, 5, x));
    }
    Ok("crop sizes and ramp magnification exact".into())
}

fn planted_screening() -> anyhow::Result<String> {
    let handle: NetworkHandle<f32> = SyntheticSpec::preset("planted-scale-pair", 32).build("planted")?;
    let fz = FzConfig {
        steps: 128,
        jitter_override: Some(0),
        transforms: TransformStack::disabled(),
        ..FzConfig::default()
    };
    let verdicts = screen_blocks(&handle, &[BlockAddress::new(1, 0)], &fz, &CriteriaThresholds::default())?;
    let passing: Vec<usize> = verdicts.iter().filter(|v| v.passes).map(|v| v.channel).collect();
    ensure!(passing == [0], "planted network passed channels {passing:?}, expected [0]");
    Ok(format!("{} channels screened, only the planted channel passes", verdicts.len()))
}

fn toy_ablation() -> anyhow::Result<String> {
    // Uniform images labeled by luminance; the classifier reads luminance at
    // block 1.0 Post channel 0 and thresholds it at 0.5.
    let colors = [[0.1, 0.2, 0.1], [0.3, 0.2, 0.4], [0.2, 0.2, 0.2], [0.7, 0.9, 0.8], [0.6, 0.7, 0.8]];
    let labels: Vec<usize> = colors.iter().map(|c| usize::from(c.iter().sum::<f64>() / 3.0 > 0.5)).collect();
    let images = Tensor::from_fn([colors.len(), 3, 8, 8], |n, c, _, _| colors[n][c]);
    let handle = NetworkHandle::new("center-classifier", 8, Preprocess::identity(3), center_classifier::<f64>())?;
    let addr = BlockAddress::new(1, 0);
    let post = handle.observe(&images, handle.resolve_tap(addr, TapPoint::Post)?, &[])?;
    let means: Vec<f64> = (0..4).map(|c| (0..colors.len()).map(|n| post.center_value(n, c)).sum::<f64>() / colors.len() as f64).collect();
    let prepared = PreparedImages::from_batches(vec![(images, labels.clone())]);

    let base = evaluate_accuracy_prepared(&AblatedNetwork::unablated(&handle), &prepared)?;
    ensure!(base == 1.0, "unablated accuracy {base}");
    let spec = AblationSpec::from_means(addr, [0], &means)?;
    let ablated = apply_mean_ablation(&handle, &spec)?;
    let got = evaluate_accuracy_prepared(&ablated, &prepared)?;
    let predicted_class = usize::from(means[0] > 0.5);
    let predicted = labels.iter().filter(|&&l| l == predicted_class).count() as f64 / labels.len() as f64;
    ensure!(got == predicted, "ablated accuracy {got}, predicted {predicted}");
    let twice = evaluate_accuracy_prepared(&ablated.ablate(&spec)?, &prepared)?;
    ensure!(twice == got, "ablation is not idempotent");
    Ok(format!("accuracy {base} -> {got}, as predicted"))
}

fn ratio_arithmetic() -> anyhow::Result<String> {
    let got = aggregate_ratio(0.5, &[0.5, 0.25]);
    ensure!(got == 1.5, "ratio {got}, expected 1.5");
    Ok("0.5 against controls {0.5, 0.25} gives 1.5".into())
}

pub fn run(print: bool) -> anyhow::Result<Completion> {
    let mut failed = Vec::new();
    let mut results = Vec::new();
    for (name, check) in CHECKS {
        match check().with_context(|| name.to_string()) {
            Ok(detail) => {
                tracing::info!("selftest {name}: ok ({detail})");
                results.push(json!({ "check": name, "ok": true, "detail": detail }));
            }
            Err(e) => {
                tracing::error!("selftest {name}: FAILED ({e:#})");
                results.push(json!({ "check": name, "ok": false, "detail": format!("{e:#}") }));
                failed.push(name);
            }
        }
    }
    if print {
        println!("{}", serde_json::to_string_pretty(&results)?);
    }
    ensure!(failed.is_empty(), "selftest failed: {}", failed.join(", "));
    Ok(Completion::Full)
}
