use std::collections::BTreeSet;

use kptransfer::datasets::{load_checkpoint, save_checkpoint, Checkpoint};
use kptransfer::hourglass::{HourglassArch, NetError, NetMode, StackedHourglassNet};
use kptransfer::tensor::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn arch(stacks: usize, depth: usize, res: usize, out: usize) -> HourglassArch {
    HourglassArch {
        num_stacks: stacks,
        depth,
        base_channels: 4,
        input_resolution: res,
        heatmap_resolution: res / 4,
        num_output_channels: out,
    }
}

fn batch(seed: u64, n: usize, res: usize) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(vec![n, 3, res, res], |_| rng.gen_range(0.0..1.0))
}

/// Parameter count written out from the layer arithmetic, independent of
/// the library's inventory.
fn expected_params(a: &HourglassArch, heads: &[usize]) -> usize {
    let c = a.base_channels;
    let m = (c / 2).max(1);
    let conv = |cin: usize, cout: usize, k: usize| k * k * cin * cout + cout;
    let bn = |ch: usize| 2 * ch;
    let residual = bn(c) + conv(c, m, 1) + bn(m) + conv(m, m, 3) + bn(m) + conv(m, c, 1);
    let hourglass = (3 * a.depth + 1) * residual;
    let mut total = conv(3, c, 4) + bn(c) + residual;
    for (u, &j) in heads.iter().enumerate() {
        total += hourglass + residual + conv(c, c, 1) + bn(c) + conv(c, j, 1);
        if u + 1 < heads.len() {
            total += conv(c, c, 1) + conv(j, c, 1);
        }
    }
    total
}

#[test]
fn output_shapes_over_a_grid() {
    for stacks in 1..=3 {
        for depth in 1..=2 {
            for res in [16, 32] {
                for out in [2, 8] {
                    let a = arch(stacks, depth, res, out);
                    let net = StackedHourglassNet::<f32>::build(&a, 1).unwrap();
                    let heads = net.predict(&batch(2, 2, res)).unwrap();
                    assert_eq!(heads.len(), stacks);
                    for h in heads {
                        assert_eq!(h.shape(), &[2, out, res / 4, res / 4]);
                    }
                }
            }
        }
    }
}

#[test]
fn parameter_count_matches_layer_arithmetic() {
    for stacks in 1..=4 {
        for depth in 1..=3 {
            let a = HourglassArch {
                base_channels: 6,
                ..arch(stacks, depth, 64, 8)
            };
            let net = StackedHourglassNet::<f32>::build(&a, 0).unwrap();
            let heads = vec![8; stacks];
            assert_eq!(net.parameter_count(), expected_params(&a, &heads));
            assert_eq!(a.parameter_count(), expected_params(&a, &heads));
        }
    }
    let a = arch(4, 2, 32, 8);
    let mixed = [8, 5, 8, 3];
    let net = StackedHourglassNet::<f32>::build_with_heads(&a, &mixed, 0).unwrap();
    assert_eq!(net.parameter_count(), expected_params(&a, &mixed));
}

#[test]
fn invalid_arch_is_rejected() {
    assert!(matches!(
        StackedHourglassNet::<f32>::build(&arch(2, 3, 16, 8), 0),
        Err(NetError::InvalidArch(_))
    ));
    let mut a = arch(2, 2, 32, 8);
    a.heatmap_resolution = 16;
    assert!(StackedHourglassNet::<f32>::build(&a, 0).is_err());
    a = arch(0, 2, 32, 8);
    assert!(StackedHourglassNet::<f32>::build(&a, 0).is_err());
}

#[test]
fn wrong_input_shape_is_rejected() {
    let net = StackedHourglassNet::<f32>::build(&arch(1, 1, 16, 2), 0).unwrap();
    assert!(matches!(net.predict(&batch(0, 1, 32)), Err(NetError::Input(_))));
}

#[test]
fn build_is_deterministic_in_seed() {
    let a = arch(2, 2, 32, 8);
    let x = StackedHourglassNet::<f32>::build(&a, 5).unwrap();
    let y = StackedHourglassNet::<f32>::build(&a, 5).unwrap();
    let z = StackedHourglassNet::<f32>::build(&a, 6).unwrap();
    assert_eq!(x, y);
    assert_ne!(x.params(), z.params());
    let input = batch(3, 2, 32);
    assert_eq!(x.predict(&input).unwrap(), y.predict(&input).unwrap());
}

#[test]
fn shared_prefix_initialises_identically_across_stack_counts() {
    let two = StackedHourglassNet::<f32>::build(&arch(2, 2, 32, 8), 9).unwrap();
    let four = StackedHourglassNet::<f32>::build(&arch(4, 2, 32, 8), 9).unwrap();
    for (name, t) in two.params() {
        assert_eq!(four.params()[name], *t, "{name}");
    }
}

#[test]
fn zero_parameters_give_zero_heatmaps() {
    let mut net = StackedHourglassNet::<f32>::build(&arch(2, 2, 32, 3), 1).unwrap();
    for t in net.params_mut().values_mut() {
        t.data_mut().fill(0.0);
    }
    for h in net.predict(&batch(4, 2, 32)).unwrap() {
        assert!(h.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn late_supervision_reaches_early_units() {
    let mut net = StackedHourglassNet::<f32>::build(&arch(4, 2, 32, 8), 2).unwrap();
    let mut g = Graph::new();
    let x = g.constant(&batch(7, 2, 32)).unwrap();
    let pass = net.forward_train(&mut g, x, &BTreeSet::new()).unwrap();
    let mut loss = None;
    for &h in &pass.heads[2..] {
        let t = g.constant(&Tensor::full(g.shape(h).to_vec(), 0.25)).unwrap();
        let l = g.mse_loss(h, t).unwrap();
        loss = Some(match loss {
            None => l,
            Some(acc) => g.add(acc, l).unwrap(),
        });
    }
    g.backward(loss.unwrap()).unwrap();
    net.accumulate_grads(&g, &pass.bindings).unwrap();
    for unit in 0..2 {
        let prefix = format!("unit{unit}.");
        let nonzero = net
            .params()
            .iter()
            .filter(|(n, _)| n.starts_with(&prefix))
            .filter(|(_, t)| t.grad().is_some_and(|g| g.iter().any(|&v| v != 0.0)))
            .count();
        assert!(nonzero > 0, "unit {unit} received no gradient");
    }
    let head = &net.params()["unit0.head.weight"];
    assert!(head.grad().unwrap().iter().any(|&v| v != 0.0));
    assert!(net.params()["unit3.head.weight"].grad().is_some());
}

#[test]
fn frozen_parameters_receive_no_gradient() {
    let mut net = StackedHourglassNet::<f32>::build(&arch(2, 1, 16, 2), 2).unwrap();
    let frozen: BTreeSet<String> = net
        .params()
        .keys()
        .filter(|n| !n.starts_with("unit1"))
        .cloned()
        .collect();
    let mut g = Graph::new();
    let x = g.constant(&batch(1, 2, 16)).unwrap();
    let pass = net.forward_train(&mut g, x, &frozen).unwrap();
    let t = g.constant(&Tensor::zeros(vec![2, 2, 4, 4])).unwrap();
    let l = g.mse_loss(pass.heads[1], t).unwrap();
    g.backward(l).unwrap();
    net.accumulate_grads(&g, &pass.bindings).unwrap();
    for (name, p) in net.params() {
        if frozen.contains(name) {
            assert!(p.grad().is_none(), "{name}");
        }
    }
    assert!(net.params()["unit1.head.weight"].grad().is_some());
}

#[test]
fn replace_head_swaps_only_head_layers() {
    let a = arch(4, 2, 32, 8);
    let before = StackedHourglassNet::<f32>::build(&a, 3).unwrap();
    let mut after = before.clone();
    after.replace_head(1, 5, 77).unwrap();
    assert_eq!(after.head_channels(), &[8, 5, 8, 8]);
    assert_eq!(after.params()["unit1.head.weight"].shape(), &[5, 4, 1, 1]);
    assert_eq!(after.params()["unit1.remap_hm.weight"].shape(), &[4, 5, 1, 1]);
    for (name, t) in before.params() {
        if !name.starts_with("unit1.head.") && !name.starts_with("unit1.remap_hm.") {
            assert_eq!(after.params()[name], *t, "{name}");
        }
    }
    let mut again = before.clone();
    again.replace_head(1, 5, 77).unwrap();
    assert_eq!(again, after);
    assert_eq!(after.parameter_count(), expected_params(&a, &[8, 5, 8, 8]));
    let heads = after.predict(&batch(0, 1, 32)).unwrap();
    assert_eq!(heads[1].shape(), &[1, 5, 8, 8]);

    let mut last = before.clone();
    last.replace_head(3, 2, 1).unwrap();
    assert!(!last.params().contains_key("unit3.remap_hm.weight"));
    assert!(matches!(
        last.replace_head(4, 2, 1),
        Err(NetError::UnitOutOfRange { index: 4, stacks: 4 })
    ));
}

#[test]
fn checkpoint_reload_forwards_bit_identically() {
    let dir = tempfile::tempdir().unwrap();
    let mut net = StackedHourglassNet::<f32>::build(&arch(2, 2, 32, 8), 4).unwrap();
    // move the running statistics away from their initial values
    let mut g = Graph::new();
    let x = g.constant(&batch(5, 2, 32)).unwrap();
    net.forward_train(&mut g, x, &BTreeSet::new()).unwrap();
    net.set_mode(NetMode::Eval);
    let ckpt = Checkpoint {
        net: net.clone(),
        metadata: serde_json::json!({"note": "reload"}),
    };
    let path = dir.path().join("net.ckpt");
    save_checkpoint(&ckpt, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    let input = batch(6, 3, 32);
    assert_eq!(net.predict(&input).unwrap(), loaded.net.predict(&input).unwrap());
    assert_eq!(loaded.metadata, ckpt.metadata);
}
