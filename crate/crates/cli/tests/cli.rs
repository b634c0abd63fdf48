// SPDX-License-Identifier: MIT OR Apache-2.0

//! End-to-end runs of the `resscale` binary on a planted toy network.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

struct Toy {
    dir: tempfile::TempDir,
}

impl Toy {
    fn new(with_dataset: bool) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        std::fs::write(root.join("net.toml"), "name = \"planted\"\ninput_resolution = 32\npreset = \"planted-scale-pair\"\n").unwrap();
        let dataset = if with_dataset {
            write_dataset(&root.join("images"));
            format!("root = \"{}\"\n", root.join("images").display())
        } else {
            String::new()
        };
        let config = format!(
            r#"weights_id = "synthetic:{net}"
output_root = "{out}"
workers = 2

[dataset]
{dataset}subset_fraction = 1.0
batch_size = 4

[fz]
steps = 128
jitter_override = 0

[fz.transforms]
enabled = false

[screen]
blocks = ["1.0"]

[ablate]
blocks = ["1.0"]
trials = 2
percentages = [10, 30]

[ablate.relaxation]
"1.0" = 1.0
"#,
            net = root.join("net.toml").display(),
            out = root.join("out").display(),
        );
        std::fs::write(root.join("config.toml"), config).unwrap();
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_resscale"))
            .arg("--config")
            .arg(self.path("config.toml"))
            .args(args)
            .env_remove("RESSCALE_CACHE")
            .output()
            .unwrap()
    }

    fn files(&self, sub: &str, ext: &str) -> Vec<PathBuf> {
        let Ok(entries) = std::fs::read_dir(self.path(sub)) else {
            return Vec::new();
        };
        let mut out: Vec<PathBuf> = entries.map(|e| e.unwrap().path()).filter(|p| p.extension().is_some_and(|e| e == ext)).collect();
        out.sort();
        out
    }
}

/// Two classes of textured images, bright and dark.
fn write_dataset(root: &Path) {
    let mut state = 7u64;
    for (class, base) in [("bright", 150u8), ("dark", 20)] {
        let dir = root.join(class);
        std::fs::create_dir_all(&dir).unwrap();
        for i in 0..6 {
            let img = image::RgbImage::from_fn(40, 40, |_, _| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                let noise = (state >> 59) as u8 * 3;
                image::Rgb([base + noise, base + noise / 2, base])
            });
            img.save(dir.join(format!("img{i}.png"))).unwrap();
        }
    }
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn selftest_passes() {
    let out = Command::new(env!("CARGO_BIN_EXE_resscale")).args(["selftest", "--print"]).output().unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let results: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(results.as_array().unwrap().len(), 4);
    assert!(results.as_array().unwrap().iter().all(|r| r["ok"] == true));
}

#[test]
fn usage_errors_exit_with_two() {
    let toy = Toy::new(false);
    for args in [
        &["visualize", "--block", "x", "--channel", "0"][..],
        &["visualize", "--block", "4.0", "--channel", "0"],
        &["visualize", "--block", "1.0", "--channel", "9"],
        &["--set", "colour=1", "screen"],
        &["--set", "screen.blocks=[]", "screen"],
        &["--set", "dataset.subset_fraction=0", "screen"],
        &["frobnicate"],
    ] {
        let out = toy.run(args);
        assert_eq!(code(&out), 2, "{args:?}: {}", stderr(&out));
    }
    // Nothing was screened, so ablation has no inputs.
    let out = toy.run(&["ablate"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("run `resscale screen` first"), "{}", stderr(&out));
    let out = toy.run(&["report"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("missing inputs") && stderr(&out).contains("verdicts for block 1.0"), "{}", stderr(&out));
}

#[test]
fn visualize_writes_six_stable_artifacts() {
    let toy = Toy::new(false);
    let out = toy.run(&["visualize", "--block", "1.0", "--channel", "0", "--print"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["visualizations"].as_array().unwrap().len(), 6);
    let pngs = toy.files("out/fz", "png");
    assert_eq!(pngs.len(), 6);
    let hash = summary["fz_hash"].as_str().unwrap();
    assert!(pngs.iter().all(|p| p.file_name().unwrap().to_str().unwrap().ends_with(&format!("_{hash}.png"))));
    let before: Vec<Vec<u8>> = pngs.iter().map(|p| std::fs::read(p).unwrap()).collect();

    let again = toy.run(&["visualize", "--block", "1.0", "--channel", "0"]);
    assert_eq!(code(&again), 0);
    assert!(again.stdout.is_empty(), "results go to stdout only with --print");
    assert_eq!(toy.files("out/fz", "png"), pngs);
    assert_eq!(pngs.iter().map(|p| std::fs::read(p).unwrap()).collect::<Vec<_>>(), before);

    // A different seed is a different configuration.
    let other = toy.run(&["--set", "fz.seed=3", "visualize", "--block", "1.0", "--channel", "0"]);
    assert_eq!(code(&other), 0);
    assert_eq!(toy.files("out/fz", "png").len(), 12);
    assert_eq!(toy.files("out", "toml").len(), 2, "one effective config per hash");
}

#[test]
fn screen_ablate_report_pipeline() {
    let toy = Toy::new(true);
    let out = toy.run(&["screen", "--print"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stderr(&out).contains("block 1.0: 1 of 4 channels pass (25.0%)"), "{}", stderr(&out));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["blocks"][0]["passing_channels"], serde_json::json!([0]));
    let verdicts = toy.files("out/screen", "csv");
    assert_eq!(verdicts.len(), 2, "{verdicts:?}");
    let table = std::fs::read_to_string(verdicts.iter().find(|p| p.to_str().unwrap().contains("summary_")).unwrap()).unwrap();
    assert_eq!(table.lines().nth(1).unwrap(), "1.0,4,1,2,25.0,0");

    let rerun = toy.run(&["screen"]);
    assert_eq!(code(&rerun), 0);
    assert!(stderr(&rerun).contains("reusing stored verdicts"));

    let out = toy.run(&["ablate", "--print"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let reports = toy.files("out/ablate", "json");
    assert_eq!(reports.len(), 1);
    let first = std::fs::read(&reports[0]).unwrap();
    let report: serde_json::Value = serde_json::from_slice(&first).unwrap();
    assert_eq!(report["passing_channels"], serde_json::json!([0]));
    assert_eq!(report["rand_ablate_accs"].as_array().unwrap().len(), 2);
    let csv = std::fs::read_to_string(&toy.files("out/ablate", "csv")[0]).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 3);

    // Resumed runs skip the work; fresh runs reproduce it exactly.
    let out = toy.run(&["ablate"]);
    assert!(stderr(&out).contains("reusing stored ablation report"));
    std::fs::remove_file(&reports[0]).unwrap();
    assert_eq!(code(&toy.run(&["ablate"])), 0);
    assert_eq!(std::fs::read(&reports[0]).unwrap(), first);

    let out = toy.run(&["report", "--print"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let figures: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(figures["figures"].as_array().unwrap().len(), 2);
    assert_eq!(toy.files("out/report", "svg").len(), 1);
    let grids = toy.files("out/report", "png");
    assert_eq!(grids.len(), 1);
    assert!(grids[0].file_name().unwrap().to_str().unwrap().starts_with("grid_b1.0_c0_"));
}

#[test]
fn report_without_ablation_is_partial() {
    let toy = Toy::new(false);
    assert_eq!(code(&toy.run(&["screen"])), 0);
    let out = toy.run(&["report"]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    let err = stderr(&out);
    assert!(err.contains("ablation report for block 1.0") && err.contains("dataset.root is not set"), "{err}");
    assert_eq!(toy.files("out/report", "png").len(), 1);
}
