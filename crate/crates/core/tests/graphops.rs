mod common;

use common::*;
use graphops::engine::{ParamStore, Tensor, LAYER_NORM_EPS, LEAKY_SLOPE};
use graphops::graphops::{apply, attention_neighbours, nearest_nodes, OpConfig, OpKind, OperationParams, Pass};
use rand::Rng;

const RELATIONAL: [OpKind; 5] =
    [OpKind::FeatureAggregation, OpKind::DifferencePropagation, OpKind::TemporalConvolution, OpKind::BackgroundIncorporation, OpKind::NodeAttention];

fn build(kind: OpKind, inst: &Instance, seed: u64) -> (OperationParams, ParamStore, OpConfig) {
    let mut r = rng(seed);
    let c_out = if matches!(kind, OpKind::NodeAttention | OpKind::Identity) { inst.channels } else { r.random_range(2..=4) };
    let m = r.random_range(1..=5);
    let k = if r.random_bool(0.5) { 3 } else { 7 };
    let cfg = inst.op_config(c_out, m, k);
    let mut store = ParamStore::new();
    let op = OperationParams::init(kind, &cfg, &mut store, "op", &mut r).unwrap();
    // Scale affinities up so the softmax is far from uniform.
    for id in store.ids().collect::<Vec<_>>() {
        if store.name(id).ends_with(".u") {
            let t = store.get(id).map(|v| v * 4.0);
            store.set(id, t).unwrap();
        }
    }
    (op, store, cfg)
}

fn run(op: &OperationParams, store: &ParamStore, cfg: &OpConfig, inst: &Instance, pass: &mut Pass<'_>) -> Mat {
    to_mat(&apply(op, store, cfg, &inst.nodes, Some(&inst.background), pass).unwrap().features)
}

#[test]
fn pre_activation_matches_loop_oracles() {
    for kind in RELATIONAL {
        let mut worst: f64 = 0.0;
        for seed in 0..100 {
            let inst = Instance::random(seed, 6, 3, 4);
            let (op, store, cfg) = build(kind, &inst, seed + 1000);
            let got = run(&op, &store, &cfg, &inst, &mut Pass::probe());
            worst = worst.max(max_abs(&got, &oracle(&op, &store, &inst, &cfg)));
        }
        assert!(worst <= 1e-10, "{kind}: max abs error {worst:e}");
    }
}

#[test]
fn activation_is_layernorm_then_leaky_relu() {
    for kind in RELATIONAL {
        for seed in 0..20 {
            let inst = Instance::random(seed, 6, 3, 4);
            let (op, mut store, cfg) = build(kind, &inst, seed + 7);
            for id in store.ids().collect::<Vec<_>>() {
                if store.name(id).contains("ln_") {
                    let t = Tensor::randn(store.get(id).shape(), 1.0, &mut rng(seed + 99));
                    store.set(id, t).unwrap();
                }
            }
            let got = run(&op, &store, &cfg, &inst, &mut Pass::eval());
            let pre = oracle(&op, &store, &inst, &cfg);
            let expect = match op {
                OperationParams::NodeAttention { .. } => pre,
                OperationParams::FeatureAggregation { norm, .. }
                | OperationParams::DifferencePropagation { norm, .. }
                | OperationParams::TemporalConvolution { norm, .. }
                | OperationParams::BackgroundIncorporation { norm, .. } => {
                    layernorm_leaky(&pre, store.get(norm.gain).data(), store.get(norm.bias).data(), LAYER_NORM_EPS, LEAKY_SLOPE)
                }
                _ => unreachable!(),
            };
            assert!(max_abs(&got, &expect) < 1e-9, "{kind} seed {seed}");
        }
    }
}

#[test]
fn shapes_and_positions_are_preserved() {
    for kind in OpKind::ALL {
        let inst = Instance::with_shape(3, 3, 2, 4, (2, 2));
        let (op, store, cfg) = build(kind, &inst, 11);
        let out = apply(&op, &store, &cfg, &inst.nodes, Some(&inst.background), &mut Pass::eval()).unwrap();
        assert_eq!(out.features.shape(), &[inst.n(), cfg.c_out], "{kind}");
        assert_eq!(out.positions, inst.nodes.positions);
        assert_eq!(out.frame_index, inst.nodes.frame_index);
    }
}

fn set(store: &mut ParamStore, id: graphops::engine::ParamId, t: Tensor) {
    store.set(id, t).unwrap();
}

#[test]
fn aggregation_with_uniform_affinity_is_the_mean() {
    let inst = Instance::with_shape(5, 2, 3, 3, (1, 1));
    let cfg = inst.op_config(3, 1, 3);
    let mut store = ParamStore::new();
    let op = OperationParams::init(OpKind::FeatureAggregation, &cfg, &mut store, "op", &mut rng(0)).unwrap();
    let OperationParams::FeatureAggregation { w, u, .. } = op else { unreachable!() };
    set(&mut store, w, Tensor::eye(3));
    set(&mut store, u, Tensor::zeros(&[3, 3]));
    let got = run(&op, &store, &cfg, &inst, &mut Pass::probe());
    let x = inst.x();
    let mean: Vec<f64> = (0..3).map(|c| x.iter().map(|r| r[c]).sum::<f64>() / x.len() as f64).collect();
    for row in got {
        for (a, b) in row.iter().zip(&mean) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn aggregation_of_a_single_node_is_its_transform() {
    let inst = Instance::with_shape(8, 1, 1, 3, (1, 1));
    let (op, store, cfg) = build(OpKind::FeatureAggregation, &inst, 2);
    let OperationParams::FeatureAggregation { w, .. } = op else { unreachable!() };
    let got = run(&op, &store, &cfg, &inst, &mut Pass::probe());
    let w = to_mat(store.get(w));
    let x = &inst.x()[0];
    for (o, row) in w.iter().enumerate() {
        let expect: f64 = row.iter().zip(x).map(|(a, b)| a * b).sum();
        assert!((got[0][o] - expect).abs() < 1e-12);
    }
}

#[test]
fn difference_propagation_vanishes_on_constant_features() {
    let mut inst = Instance::with_shape(4, 2, 3, 4, (1, 1));
    let row = inst.nodes.features.row(0).to_vec();
    let flat: Vec<f64> = (0..inst.n()).flat_map(|_| row.clone()).collect();
    inst.nodes = inst.nodes.with_features(Tensor::new(vec![inst.n(), 4], flat).unwrap());
    let (op, store, cfg) = build(OpKind::DifferencePropagation, &inst, 3);
    let got = run(&op, &store, &cfg, &inst, &mut Pass::probe());
    assert!(got.iter().flatten().all(|v| *v == 0.0));
}

#[test]
fn difference_propagation_two_node_example() {
    let mut inst = Instance::with_shape(0, 1, 2, 2, (1, 1));
    inst.nodes = inst.nodes.with_features(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]));
    let cfg = inst.op_config(2, 1, 3);
    let mut store = ParamStore::new();
    let op = OperationParams::init(OpKind::DifferencePropagation, &cfg, &mut store, "op", &mut rng(0)).unwrap();
    let OperationParams::DifferencePropagation { w, u, .. } = op else { unreachable!() };
    set(&mut store, w, Tensor::eye(2));
    set(&mut store, u, Tensor::zeros(&[2, 2]));
    let got = run(&op, &store, &cfg, &inst, &mut Pass::probe());
    assert_eq!(got, vec![vec![1.0, -1.0], vec![-1.0, 1.0]]);
}

#[test]
fn difference_propagation_of_a_single_node_is_zero() {
    let inst = Instance::with_shape(1, 1, 1, 3, (1, 1));
    let (op, store, cfg) = build(OpKind::DifferencePropagation, &inst, 4);
    let got = run(&op, &store, &cfg, &inst, &mut Pass::probe());
    assert!(got.iter().flatten().all(|v| *v == 0.0));
}

fn conv_with(inst: &Instance, k: usize, taps: impl Fn(usize, usize, usize) -> f64) -> Mat {
    let c = inst.channels;
    let cfg = inst.op_config(c, 1, k);
    let mut store = ParamStore::new();
    let op = OperationParams::init(OpKind::TemporalConvolution, &cfg, &mut store, "op", &mut rng(0)).unwrap();
    let OperationParams::TemporalConvolution { kernel, .. } = op else { unreachable!() };
    let data = (0..k).flat_map(|r| (0..c).flat_map(move |o| (0..c).map(move |i| (r, o, i)))).map(|(r, o, i)| taps(r, o, i)).collect();
    set(&mut store, kernel, Tensor::new(vec![k, c, c], data).unwrap());
    run(&op, &store, &cfg, inst, &mut Pass::probe())
}

#[test]
fn centre_delta_kernel_is_identity() {
    // Unit-norm rows make every node its own nearest neighbour in its frame.
    let mut inst = Instance::with_shape(6, 4, 2, 3, (1, 1));
    let unit: Vec<f64> = inst
        .x()
        .iter()
        .flat_map(|r| {
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.iter().map(move |v| v / norm).collect::<Vec<_>>()
        })
        .collect();
    inst.nodes = inst.nodes.with_features(Tensor::new(vec![8, 3], unit).unwrap());
    let got = conv_with(&inst, 7, |r, o, i| if r == 3 && o == i { 1.0 } else { 0.0 });
    assert!(max_abs(&got, &inst.x()) < 1e-12);
}

#[test]
fn averaging_kernel_keeps_constant_sequences_in_the_interior() {
    let base = Instance::with_shape(6, 1, 2, 3, (1, 1));
    let mut inst = Instance::with_shape(6, 4, 2, 3, (1, 1));
    let frame = base.x();
    let flat: Vec<f64> = (0..4).flat_map(|_| frame.iter().flatten().cloned().collect::<Vec<_>>()).collect();
    inst.nodes = inst.nodes.with_features(Tensor::new(vec![8, 3], flat).unwrap());
    let got = conv_with(&inst, 3, |_, o, i| if o == i { 1.0 / 3.0 } else { 0.0 });
    let x = inst.x();
    for i in 0..inst.n() {
        let t = inst.nodes.frame_index[i];
        if t > 0 && t < 3 {
            for c in 0..3 {
                assert!((got[i][c] - x[i][c]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn nearest_nodes_match_exhaustive_scan() {
    for seed in 0..50 {
        let inst = Instance::with_shape(seed, 4, 2, 3, (1, 1));
        let got = nearest_nodes(&inst.nodes.features, inst.nodes.layout());
        assert_eq!(got, nearest_sequence(&inst.x(), &inst.nodes.frame_index, 4));
    }
}

#[test]
fn background_with_uniform_affinity_is_the_frame_mean() {
    let inst = Instance::with_shape(9, 2, 2, 3, (2, 2));
    let cfg = inst.op_config(3, 1, 3);
    let mut store = ParamStore::new();
    let op = OperationParams::init(OpKind::BackgroundIncorporation, &cfg, &mut store, "op", &mut rng(0)).unwrap();
    let OperationParams::BackgroundIncorporation { u, v, w, .. } = op else { unreachable!() };
    set(&mut store, u, Tensor::zeros(&[3, 3]));
    set(&mut store, v, Tensor::zeros(&[3, 4]));
    set(&mut store, w, Tensor::eye(3));
    let got = run(&op, &store, &cfg, &inst, &mut Pass::probe());
    for i in 0..inst.n() {
        let cells = inst.frame_cells(inst.nodes.frame_index[i]);
        for c in 0..3 {
            let mean = cells.iter().map(|r| r[c]).sum::<f64>() / 4.0;
            assert!((got[i][c] - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn constant_background_makes_aggregation_independent_of_affinity() {
    let mut inst = Instance::with_shape(10, 2, 2, 3, (2, 2));
    inst.background = graphops::graphops::BackgroundMap::new(Tensor::full(&[2, 2, 2, 3], 0.7)).unwrap();
    let cfg = inst.op_config(3, 1, 3);
    let outputs: Vec<Mat> = (0..3)
        .map(|s| {
            let mut store = ParamStore::new();
            let op = OperationParams::init(OpKind::BackgroundIncorporation, &cfg, &mut store, "op", &mut rng(0)).unwrap();
            let OperationParams::BackgroundIncorporation { u, v, .. } = op else { unreachable!() };
            set(&mut store, u, Tensor::randn(&[3, 3], 3.0, &mut rng(s)));
            set(&mut store, v, Tensor::zeros(&[3, 4]));
            run(&op, &store, &cfg, &inst, &mut Pass::probe())
        })
        .collect();
    assert!(max_abs(&outputs[0], &outputs[1]) < 1e-12);
    assert!(max_abs(&outputs[0], &outputs[2]) < 1e-12);
}

#[test]
fn missing_background_is_a_configuration_error() {
    let inst = Instance::with_shape(1, 2, 2, 3, (1, 1));
    let (op, store, cfg) = build(OpKind::BackgroundIncorporation, &inst, 5);
    let err = apply(&op, &store, &cfg, &inst.nodes, None, &mut Pass::eval()).unwrap_err();
    assert!(matches!(err, graphops::Error::Config(_)), "{err}");
}

#[test]
fn zero_attention_weights_halve_the_input() {
    let inst = Instance::with_shape(12, 2, 3, 3, (1, 1));
    let (op, mut store, cfg) = build(OpKind::NodeAttention, &inst, 6);
    let OperationParams::NodeAttention { w } = op else { unreachable!() };
    let shape = store.get(w).shape().to_vec();
    set(&mut store, w, Tensor::zeros(&shape));
    let got = run(&op, &store, &cfg, &inst, &mut Pass::eval());
    let x = inst.x();
    for (g, r) in got.iter().flatten().zip(x.iter().flatten()) {
        assert_eq!(*g, 0.5 * r);
    }
}

#[test]
fn attention_neighbours_match_full_sort() {
    for seed in 0..50 {
        let inst = Instance::random(seed, 6, 3, 4);
        let m = 1 + seed as usize % 5;
        let got = attention_neighbours(&inst.nodes.features, m);
        for (i, nb) in got.iter().enumerate() {
            assert_eq!(nb, &top_similar(&inst.x(), i, m), "seed {seed} node {i}");
        }
    }
}

#[test]
fn attention_neighbour_ties_prefer_lower_index() {
    let x = Tensor::from_rows(&[&[1.0, 0.0], &[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]]);
    let got = attention_neighbours(&x, 2);
    assert_eq!(got[0], vec![1, 2]);
    assert_eq!(got[3], vec![0, 1]);
}

#[test]
fn identity_and_zero_examples() {
    let inst = Instance::with_shape(2, 2, 2, 3, (1, 1));
    let (zero, store, cfg) = build(OpKind::Zero, &inst, 0);
    assert!(run(&zero, &store, &cfg, &inst, &mut Pass::eval()).iter().flatten().all(|v| *v == 0.0));
    let (id, store, cfg) = build(OpKind::Identity, &inst, 0);
    assert_eq!(run(&id, &store, &cfg, &inst, &mut Pass::eval()), inst.x());
}

#[test]
fn identity_dropout_preserves_the_mean() {
    let n = 100_000;
    let nodes = Instance::with_shape(0, 1, 1, 2, (1, 1));
    let feats = Tensor::full(&[n, 1], 2.0);
    let pos = Tensor::zeros(&[n, 3]);
    let big = graphops::graphops::NodeSet::new(feats, pos, vec![0; n], 1).unwrap();
    let cfg = OpConfig { c_in: 1, c_out: 1, identity_dropout: 0.3, ..nodes.op_config(1, 1, 3) };
    let mut r = rng(42);
    let out = apply(&OperationParams::Identity, &ParamStore::new(), &cfg, &big, None, &mut Pass::train(&mut r)).unwrap();
    let mean = out.features.sum() / n as f64;
    assert!((mean - 2.0).abs() / 2.0 < 0.02, "mean {mean}");
    let dropped = out.features.data().iter().filter(|v| **v == 0.0).count() as f64 / n as f64;
    assert!((dropped - 0.3).abs() < 0.01, "dropped {dropped}");
}
