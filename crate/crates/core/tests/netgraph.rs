// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use common::{fixture, read_safetensors, Stored};
use resscale::layers::Layer;
use resscale::netgraph::arch::{RESNET18, RESNET_MINI};
use resscale::netgraph::{center_objective, NetworkHandle, Preprocess, Registry};
use resscale::{BlockAddress, Error, Scalar, TapPoint, Tensor};

fn mini<T: Scalar>() -> NetworkHandle<T> {
    let id = format!("file:resnet-mini:{}", fixture("resnet_mini.safetensors").display());
    Registry::new("/nonexistent").load(&id).unwrap()
}

fn to_tensor<T: Scalar>(s: &Stored) -> Tensor<T> {
    let shape: [usize; 4] = s.shape.clone().try_into().unwrap();
    Tensor::from_vec(shape, s.values.iter().map(|&v| T::lit(v)).collect())
}

fn max_rel_err<T: Scalar>(got: &Tensor<T>, want: &Stored) -> f64 {
    assert_eq!(got.shape().to_vec(), want.shape);
    let scale = want.values.iter().fold(1e-3_f64, |m, v| m.max(v.abs()));
    got.data().iter().zip(&want.values).map(|(a, b)| (a.as_f64() - b).abs()).fold(0.0, f64::max) / scale
}

#[test]
fn logits_and_taps_match_pytorch_in_f64_and_f32() {
    let exp = read_safetensors(&fixture("resnet_mini_expected.safetensors"));
    for (tol, run) in [(1e-10, true), (2e-4, false)] {
        let (logit_err, tap_err) = if run {
            check::<f64>(&exp)
        } else {
            check::<f32>(&exp)
        };
        assert!(logit_err < tol, "logits rel err {logit_err} (tol {tol})");
        assert!(tap_err < tol, "tap rel err {tap_err} (tol {tol})");
    }

    fn check<T: Scalar>(exp: &std::collections::HashMap<String, Stored>) -> (f64, f64) {
        let h = mini::<T>();
        let images = to_tensor::<T>(&exp["images"]);
        let logits = h.logits(&images, &[]).unwrap();
        let want = &exp["logits"].values;
        let scale = want.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let logit_err = logits.iter().flatten().zip(want).map(|(a, b)| (a.as_f64() - b).abs()).fold(0.0, f64::max) / scale;
        let mut tap_err = 0.0_f64;
        for addr in h.blocks() {
            let taps = h.block_taps(&images, addr, &[]).unwrap();
            for tap in TapPoint::ALL {
                tap_err = tap_err.max(max_rel_err(taps.get(tap), &exp[&format!("tap.{addr}.{tap}")]));
            }
        }
        (logit_err, tap_err)
    }
}

#[test]
fn input_gradients_match_pytorch_autograd() {
    let exp = read_safetensors(&fixture("resnet_mini_expected.safetensors"));
    let h = mini::<f64>();
    let image = to_tensor::<f64>(&exp["images"]).select(0);
    for (addr, tap, channel) in [("2.1", TapPoint::Pre, 3), ("3.0", TapPoint::In, 5), ("1.1", TapPoint::Post, 2), ("4.1", TapPoint::Post, 11)] {
        let addr: BlockAddress = addr.parse().unwrap();
        let site = h.resolve_tap(addr, tap).unwrap();
        let (value, grad) = h.site_gradient(&image, site, center_objective(channel)).unwrap();
        let key = format!("{addr}.{tap}.{channel}");
        assert!((value - exp[&format!("value.{key}")].values[0]).abs() < 1e-10, "{key} value");
        let err = max_rel_err(&grad, &exp[&format!("grad.{key}")]);
        assert!(err < 1e-9, "{key} gradient rel err {err}");
    }
}

#[test]
fn resnet18_block_inventory() {
    let h = NetworkHandle::new("r18", 224, Preprocess::imagenet(), RESNET18.random_init::<f32>(1)).unwrap();
    let names: Vec<String> = h.blocks().iter().map(|a| a.to_string()).collect();
    assert_eq!(names, ["1.0", "1.1", "2.0", "2.1", "3.0", "3.1", "4.0", "4.1"]);
    assert!(h.eval_mode());
    assert_eq!(h.channels("2.1".parse().unwrap()).unwrap(), 128);
    assert_eq!(h.channels("3.1".parse().unwrap()).unwrap(), 256);
    assert!(matches!(h.check_channel("2.1".parse().unwrap(), 128), Err(Error::InvalidChannel { .. })));
    assert!(matches!(h.resolve_tap("5.0".parse().unwrap(), TapPoint::In), Err(Error::InvalidAddress { .. })));
}

#[test]
fn center_neuron_is_floor_half() {
    let t = Tensor::<f32>::zeros([1, 1, 7, 8]);
    assert_eq!(t.center(), (3, 4));
    let t = Tensor::<f32>::zeros([1, 1, 56, 56]);
    assert_eq!(t.center(), (28, 28));
}

/// Bounding-box side of the union of nonzero input-gradient footprints.
fn gradient_footprint(h: &NetworkHandle<f64>, addr: BlockAddress, tap: TapPoint, size: usize) -> usize {
    let site = h.resolve_tap(addr, tap).unwrap();
    let mut rng = common::Lcg(3);
    let (mut y0, mut y1, mut x0, mut x1) = (usize::MAX, 0, usize::MAX, 0);
    for _ in 0..12 {
        let img = Tensor::from_fn([1, 3, size, size], |_, _, _, _| 0.05 + rng.next_f64());
        let (_, g) = h.site_gradient(&img, site, center_objective(0)).unwrap();
        for y in 0..size {
            for x in 0..size {
                if (0..3).any(|c| g.at(0, c, y, x) != 0.0) {
                    y0 = y0.min(y);
                    y1 = y1.max(y);
                    x0 = x0.min(x);
                    x1 = x1.max(x);
                }
            }
        }
    }
    assert_eq!(y1 - y0, x1 - x0);
    y1 - y0 + 1
}

#[test]
fn receptive_field_matches_gradient_footprint() {
    // Positive weights and inputs keep every rectifier active, so the
    // footprint is limited only by geometry (and max-pool routing, which
    // the union over random images covers).
    let mut net = RESNET_MINI.random_init::<f64>(5);
    let abs = |layers: &mut Vec<Layer<f64>>| {
        for l in layers.iter_mut() {
            if let Layer::Conv(c) = l {
                c.weight.iter_mut().for_each(|w| *w = w.abs() + 1e-3);
            }
        }
    };
    abs(&mut net.stem);
    for stage in &mut net.stages {
        for b in stage {
            abs(&mut b.main);
            abs(&mut b.shortcut);
        }
    }
    let h = NetworkHandle::new("mini+", 128, Preprocess::identity(3), net).unwrap();
    for (addr, tap) in [("1.0", TapPoint::Pre), ("1.1", TapPoint::In), ("1.1", TapPoint::Post), ("2.0", TapPoint::In), ("2.0", TapPoint::Pre)] {
        let addr: BlockAddress = addr.parse().unwrap();
        let rf = h.receptive_field(addr, tap).unwrap();
        assert_eq!(gradient_footprint(&h, addr, tap, 128), rf, "{addr} {tap}");
    }
    let r18 = NetworkHandle::new("r18", 224, Preprocess::imagenet(), RESNET18.random_init::<f32>(0)).unwrap();
    assert_eq!(r18.receptive_field("1.1".parse().unwrap(), TapPoint::In).unwrap(), 27);
}

#[test]
fn early_exit_observation_matches_full_pass() {
    let h = mini::<f64>();
    let img = Tensor::from_fn([2, 3, 64, 64], |n, c, y, x| ((n * 5 + c * 3 + y * 7 + x) as f64 * 0.13).sin() * 0.5 + 0.5);
    let site = h.resolve_tap("2.0".parse().unwrap(), TapPoint::Post).unwrap();
    let early = h.observe(&img, site, &[]).unwrap();
    let (_, full) = h.logits_observed(&img, &[], &[site]).unwrap();
    assert_eq!(early, full[0]);
}

#[test]
fn checkpoint_shape_mismatch_is_a_weights_error() {
    let id = format!("file:resnet18:{}", fixture("resnet_mini.safetensors").display());
    let err = Registry::new("/nonexistent").load::<f32>(&id).unwrap_err();
    assert!(matches!(err, Error::Weights(_)), "{err}");
}
