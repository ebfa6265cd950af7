use super::*;
use crate::autodiff::Graph;
use crate::error::Error;
use crate::tensor::Tensor;

fn conv(k: usize, cin: usize, cout: usize) -> usize {
    k * k * cin * cout + cout
}

fn dense(i: usize, o: usize) -> usize {
    i * o + o
}

fn norm(c: usize) -> usize {
    2 * c
}

/// Per-layer closed-form trainable count with norm layers.
fn oracle(arch: Arch) -> usize {
    let input = conv(7, 3, 32) + norm(32);
    let readout = |c| dense(c, 512) + dense(512, 2);
    let stack = |depth: usize, width: usize| {
        (0..depth).map(|i| conv(5, if i == 0 { 32 } else { width }, width) + norm(width)).sum::<usize>() + readout(width)
    };
    match arch {
        Arch::Ff1L | Arch::Atr1L => input + stack(1, 32),
        Arch::Ff4L | Arch::Atr4L => input + stack(3, 32),
        Arch::Ff7L | Arch::Atr7L => input + stack(5, 32),
        Arch::Ff7Lx2 | Arch::Atr7Lx2 => input + stack(5, 64),
        Arch::FfSmcnn => input - 7 * 7 * 3 * 16 + stack(5, 32),
        Arch::Gru1L => input + 25 * 32 * 96 + 25 * 32 * 64 + 25 * 32 * 32 + 96 + norm(32) + readout(32),
        Arch::V1Net1L => {
            let sep = |k: usize, cout: usize| k * k * 32 + 32 * cout;
            let cell = 2 * sep(5, 128) + 128 + sep(15, 32) + 32 + 2 * (sep(7, 32) + 32) + 64;
            input + cell + readout(32)
        }
    }
}

#[test]
fn ff1l_layers_match_table() {
    let spec = ModelSpec::for_arch(Arch::Ff1L, 64);
    assert_eq!(spec.layer_labels(), ["Conv7x7x32+maxpool", "Conv5x5x32", "GAP", "Dense512", "Dense2", "Softmax"]);
    assert_eq!(spec.depth(), 3);
    assert_eq!(ModelSpec::for_arch(Arch::Ff4L, 64).depth(), 5);
    assert_eq!(ModelSpec::for_arch(Arch::Ff7L, 64).depth(), 7);
}

#[test]
fn atr7lx2_is_dilated_and_wide() {
    let spec = ModelSpec::for_arch(Arch::Atr7Lx2, 64);
    let labels = spec.layer_labels();
    assert_eq!(labels[1..6], vec!["AtrousConv5x5x64(d=2)".to_string(); 5]);
}

#[test]
fn v1net_block_is_one_cell() {
    let spec = ModelSpec::for_arch(Arch::V1Net1L, 64);
    assert_eq!(spec.layer_labels()[1], "V1Net5x5x32(T=5)");
    let cfg = spec.v1net_config().unwrap();
    assert_eq!((cfg.width, cfg.steps), (32, 5));
    assert_eq!(ModelSpec::for_arch(Arch::Gru1L, 64).layer_labels()[1], "ConvGRU5x5x32(T=5)");
}

#[test]
fn atrous_differs_only_in_dilation() {
    for (ff, atr) in [(Arch::Ff1L, Arch::Atr1L), (Arch::Ff4L, Arch::Atr4L), (Arch::Ff7L, Arch::Atr7L), (Arch::Ff7Lx2, Arch::Atr7Lx2)] {
        let a = ModelSpec::for_arch(ff, 64);
        let b = ModelSpec::for_arch(atr, 64);
        assert_eq!(a.layers.len(), b.layers.len());
        for (i, (la, lb)) in a.layers.iter().zip(&b.layers).enumerate() {
            match (la.kind, lb.kind) {
                (LayerKind::Conv { dilation: da, .. }, LayerKind::Conv { dilation: db, .. }) if i > 0 => {
                    assert_eq!((da, db), (1, 2));
                    let mut lb = *lb;
                    if let LayerKind::Conv { ref mut dilation, .. } = lb.kind {
                        *dilation = 1;
                    }
                    assert_eq!(*la, lb);
                }
                _ => assert_eq!(la, lb),
            }
        }
    }
}

#[test]
fn x2_doubles_intermediate_filters() {
    let a = ModelSpec::for_arch(Arch::Ff7L, 64);
    let b = ModelSpec::for_arch(Arch::Ff7Lx2, 64);
    for (la, lb) in a.layers[1..6].iter().zip(&b.layers[1..6]) {
        match (la.kind, lb.kind) {
            (LayerKind::Conv { n_out: x, .. }, LayerKind::Conv { n_out: y, .. }) => assert_eq!(2 * x, y),
            _ => panic!("expected convolutions"),
        }
    }
}

#[test]
fn ff1l_without_norm_has_48290_params() {
    let m = build_model::<f32>(&ModelSpec::for_arch(Arch::Ff1L, 64).without_norm(), 0).unwrap();
    assert_eq!(count_params(&m), 4736 + 25632 + 16896 + 1026);
    assert_eq!(count_params(&m), 48_290);
    let dense512: usize = m.params.iter().filter(|p| p.name.starts_with("readout/dense512")).map(|p| p.tensor.len()).sum();
    assert_eq!(dense512, 32 * 512 + 512);
    let mut spec = ModelSpec::for_arch(Arch::Ff1L, 64).without_norm();
    spec.layers[1].norm = true;
    assert_eq!(count_params(&build_model::<f32>(&spec, 0).unwrap()), 48_290 + 64);
}

#[test]
fn counts_match_closed_form_for_every_arch() {
    for arch in Arch::ALL {
        let m = build_model::<f32>(&ModelSpec::for_arch(arch, 64), 0).unwrap();
        assert_eq!(count_params(&m), oracle(arch), "{arch}");
    }
    let c = |a| oracle(a);
    assert!(c(Arch::V1Net1L) < c(Arch::Gru1L));
    assert!(c(Arch::Gru1L) < c(Arch::Ff7Lx2));
}

#[test]
fn unknown_arch_rejected() {
    assert!(matches!("FF-2L".parse::<Arch>(), Err(Error::UnknownArch(_))));
    for a in Arch::ALL {
        assert_eq!(a.id().parse::<Arch>().unwrap(), a);
    }
}

#[test]
fn outputs_are_probabilities() {
    let x = Tensor::from_fn(vec![2, 12, 12, 3], |i| ((i * 7919) % 255) as f32 / 255.0);
    for arch in Arch::ALL {
        let m = build_model::<f32>(&ModelSpec::for_arch(arch, 12), 1).unwrap();
        let p = m.predict(&x).unwrap();
        assert_eq!(p.shape(), &[2, 2]);
        for row in p.data().chunks(2) {
            assert!((row[0] + row[1] - 1.0).abs() < 1e-6, "{arch}");
        }
    }
}

#[test]
fn partition_and_transfer_variables() {
    let m = build_model::<f32>(&ModelSpec::for_arch(Arch::V1Net1L, 64), 0).unwrap();
    let transfer = m.transfer_variables();
    let names: Vec<&str> = transfer.iter().map(|&i| m.params[i].name.as_str()).collect();
    assert_eq!(transfer.len(), 10, "{names:?}");
    for p in &m.params {
        let in_transfer = names.contains(&p.name.as_str());
        let expect = matches!(p.group, ParamGroup::Norm | ParamGroup::Readout);
        assert_eq!(in_transfer, expect, "{}", p.name);
    }
    let mut seen = std::collections::HashSet::new();
    assert!(m.params.iter().all(|p| seen.insert(p.name.clone())));
}

#[test]
fn smcnn_bank_is_fixed_and_excluded() {
    let m = build_model::<f32>(&ModelSpec::for_arch(Arch::FfSmcnn, 64), 0).unwrap();
    let dog = m.params.iter().find(|p| p.name == "input/dog_kernel").unwrap();
    assert_eq!(dog.kind, ParamKind::Fixed);
    assert_eq!(dog.tensor.shape(), &[7, 7, 3, 16]);
    assert!(TrainScope::All.trains(dog) == false);
}

#[test]
fn build_is_deterministic() {
    let spec = ModelSpec::for_arch(Arch::Gru1L, 32);
    let a = build_model::<f32>(&spec, 7).unwrap();
    let b = build_model::<f32>(&spec, 7).unwrap();
    let c = build_model::<f32>(&spec, 8).unwrap();
    assert_eq!(a.params, b.params);
    assert_ne!(a.params, c.params);
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let spec = ModelSpec::for_arch(Arch::V1Net1L, 16);
    let m = build_model::<f32>(&spec, 3).unwrap();
    let bytes = m.to_checkpoint(serde_json::json!({"note": 1})).unwrap().to_bytes().unwrap();
    let back = Model::<f32>::from_checkpoint(&crate::checkpoint::Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(back.params, m.params);
    let x = Tensor::from_fn(vec![1, 16, 16, 3], |i| (i % 5) as f32 * 0.2);
    assert_eq!(m.predict(&x).unwrap(), back.predict(&x).unwrap());
}

#[test]
fn training_mode_updates_running_stats() {
    let mut m = build_model::<f64>(&ModelSpec::for_arch(Arch::Ff1L, 8), 0).unwrap();
    let x = Tensor::from_fn(vec![2, 8, 8, 3], |i| (i as f64 * 0.3).sin());
    let mut g = Graph::new();
    let vars = m.bind(&mut g, Some(TrainScope::All)).unwrap();
    let xv = g.constant(x).unwrap();
    let out = m.forward(&mut g, &vars, xv, Mode::Train).unwrap();
    assert_eq!(out.batch_stats.len(), 2);
    let idx = m.param_index("input/norm/moving_mean").unwrap();
    let expect: Vec<f64> = out.batch_stats[0].mean.iter().map(|v| 0.01 * v).collect();
    m.apply_batch_stats(&out.batch_stats);
    for (a, b) in m.params[idx].tensor.data().iter().zip(&expect) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn summary_lists_rows_and_total() {
    let m = build_model::<f32>(&ModelSpec::for_arch(Arch::Ff1L, 64).without_norm(), 0).unwrap();
    let s = m.summary();
    assert!(s.contains("Conv7x7x32+maxpool"));
    assert!(s.contains("[32,32,32]"));
    assert!(s.contains("total trainable parameters: 48290"));
}

#[test]
fn hidden_states_exposed_for_recurrent_blocks() {
    for (arch, n) in [(Arch::V1Net1L, 5), (Arch::Gru1L, 5), (Arch::Ff1L, 0)] {
        let m = build_model::<f32>(&ModelSpec::for_arch(arch, 8), 0).unwrap();
        let mut g = Graph::new();
        let vars = m.bind(&mut g, None).unwrap();
        let xv = g.constant(Tensor::zeros(vec![1, 8, 8, 3])).unwrap();
        let out = m.forward(&mut g, &vars, xv, Mode::Eval).unwrap();
        assert_eq!(out.hidden.len(), n);
    }
}
