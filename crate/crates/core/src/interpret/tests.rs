use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::Graph;
use crate::checkpoint::Checkpoint;
use crate::stimulus::{compose_markedlong, MarkedLongConfig, RgbImage};
use crate::tensor::Tensor;
use crate::zoo::{build_model, Arch, Mode, Model, ModelSpec};

fn v1net_model(size: usize, seed: u64) -> Model<f32> {
    build_model(&ModelSpec::for_arch(Arch::V1Net1L, size), seed).unwrap()
}

fn random_bank(seed: u64, kh: usize, kw: usize, k: usize) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(vec![kh, kw, k], |_| rng.gen_range(-1.0..1.0))
}

fn check_invariants(r: &PcaResult, bank: &Tensor<f64>) {
    let sum: f64 = r.ratios.iter().sum();
    assert!((sum - 1.0).abs() < 1e-8);
    assert!(r.ratios.iter().all(|&v| v >= 0.0));
    assert!(r.ratios.windows(2).all(|w| w[0] >= w[1]));
    for (i, a) in r.components.iter().enumerate() {
        for (j, b) in r.components.iter().enumerate() {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let want = if i == j { 1.0 } else { 0.0 };
            assert!((dot - want).abs() < 1e-8, "gram[{i}][{j}] = {dot}");
        }
    }
    let (_, _, members) = bank_members(bank).unwrap();
    for m in &members {
        let back = r.reconstruct(&r.project(m));
        let err = back.iter().zip(m).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-8, "reconstruction error {err}");
    }
}

#[test]
fn hand_computed_two_by_two_case() {
    // Kernels e1, e2 and 0 as flattened 2x2 patches. Centered they span the
    // (x1, x2) plane with covariance [[1/3, -1/6], [-1/6, 1/3]], whose
    // eigenvalues are 1/2 along (1, -1) and 1/6 along (1, 1).
    let flat = [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 0.0, 0.0]];
    let bank = Tensor::from_fn(vec![2, 2, 3], |i| flat[i % 3][i / 3]);
    let r = kernel_pca(&bank).unwrap();
    let want = [0.75, 0.25, 0.0, 0.0];
    for (a, b) in r.ratios.iter().zip(want) {
        assert!((a - b).abs() < 1e-10, "{:?}", r.ratios);
    }
    assert!((r.eigenvalues[0] - 0.5).abs() < 1e-10 && (r.eigenvalues[1] - 1.0 / 6.0).abs() < 1e-10);
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let pc1 = &r.components[0];
    let sign = pc1[0].signum();
    for (a, b) in pc1.iter().zip([s, -s, 0.0, 0.0]) {
        assert!((a * sign - b).abs() < 1e-10);
    }
    assert_eq!(r.mean, vec![1.0 / 3.0, 1.0 / 3.0, 0.0, 0.0]);
    check_invariants(&r, &bank);
}

#[test]
fn degenerate_bank_puts_everything_on_pc1() {
    let bank = Tensor::from_fn(vec![3, 3, 5], |i| (i / 5) as f64 * 0.1);
    let r = kernel_pca(&bank).unwrap();
    assert_eq!(r.ratios[0], 1.0);
    assert!(r.ratios[1..].iter().all(|&v| v == 0.0));
    check_invariants(&r, &bank);
}

#[test]
fn rejects_tiny_or_misshapen_banks() {
    assert!(kernel_pca(&Tensor::<f64>::zeros(vec![3, 3, 1])).is_err());
    assert!(kernel_pca(&Tensor::<f64>::zeros(vec![3, 3])).is_err());
    assert!(kernel_pca(&Tensor::<f64>::zeros(vec![3, 3, 4, 2])).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn random_bank_invariants(seed in any::<u64>(), ks in 1usize..4, k in 2usize..40) {
        let size = 2 * ks + 1;
        let bank = random_bank(seed, size, size, k);
        let r = kernel_pca(&bank).unwrap();
        check_invariants(&r, &bank);
    }
}

#[test]
fn model_banks_and_gallery() {
    let m = v1net_model(16, 3);
    let (_, params) = m.v1net_params().unwrap();
    let banks = horizontal_banks(&params);
    let results: Vec<(String, PcaResult)> =
        banks.iter().map(|(n, b)| (n.to_string(), kernel_pca(&b.cast::<f64>()).unwrap())).collect();
    assert_eq!(results[0].1.kh, 15);
    assert_eq!(results[1].1.kh, 7);
    assert_eq!(results[0].1.components.len(), 225);
    let dir = tempfile::tempdir().unwrap();
    let rows = render_pc_gallery(&results, 6, dir.path()).unwrap();
    assert_eq!(rows.len(), 3);
    let (w, h, ratios) = read_gallery_annotations(&std::fs::read(dir.path().join(GALLERY_PNG)).unwrap()).unwrap();
    assert_eq!(ratios.len(), 3);
    assert!(w > h);
    for (row, (_, r)) in ratios.iter().zip(&results) {
        assert_eq!(row.len(), 6);
        assert_eq!(row[..], r.ratios[..6]);
        assert!(row.windows(2).all(|w| w[0] >= w[1]));
    }
    let json: Vec<GalleryRow> = serde_json::from_slice(&std::fs::read(dir.path().join(GALLERY_JSON)).unwrap()).unwrap();
    assert_eq!(json, rows);
}

#[test]
fn activations_have_one_map_per_step() {
    let m = v1net_model(32, 4);
    let (img, _) = compose_markedlong(&MarkedLongConfig { size: 32, ..MarkedLongConfig::desk() }, 1, true).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let trace = dump_activations(&m, &img, "img1", &DEFAULT_CHANNELS, dir.path()).unwrap();
    assert_eq!(trace.steps, 5);
    assert_eq!(trace.maps.len(), 2);
    assert!(trace.maps.iter().all(|c| c.len() == 5));
    assert_eq!((trace.height, trace.width), (16, 16));
    assert_eq!(trace.files.len(), 10);
    for f in &trace.files {
        let png = RgbImage::from_png(&std::fs::read(dir.path().join(f)).unwrap()).unwrap();
        assert_eq!((png.width(), png.height()), (16, 16));
    }

    // Re-execution oracle: unroll the cell alone on the block's input.
    let mut g = Graph::new();
    let vars = m.bind(&mut g, None).unwrap();
    let x = g.constant(img.to_tensor::<f32>().reshape(vec![1, 32, 32, 3]).unwrap()).unwrap();
    let out = m.forward(&mut g, &vars, x, Mode::Eval).unwrap();
    let feat = g.value(out.recurrent_input.unwrap()).clone();
    let (cfg, params) = m.v1net_params().unwrap();
    let (states, _) = params.unroll_values(&cfg, &feat, cfg.steps).unwrap();
    for (ci, &c) in trace.channels.iter().enumerate() {
        for (t, s) in states.iter().enumerate() {
            let want: Vec<f32> = s.h.data().iter().skip(c).step_by(cfg.width).copied().collect();
            assert_eq!(trace.maps[ci][t], want);
        }
    }

    // Raw values are stored losslessly.
    let raw = Checkpoint::load(dir.path().join(RAW_FILE)).unwrap();
    let t3 = raw.get("h28/t3").unwrap().to_tensor::<f32>().unwrap();
    assert_eq!(t3.data(), &trace.maps[1][2][..]);
}

#[test]
fn black_image_gives_zero_maps() {
    let m = v1net_model(16, 5);
    let dir = tempfile::tempdir().unwrap();
    let trace = dump_activations(&m, &RgbImage::new(16, 16), "black", &[0, 5, 31], dir.path()).unwrap();
    assert!(trace.maps.iter().flatten().flatten().all(|&v| v == 0.0));
}

#[test]
fn dumps_are_reproducible_from_checkpoint() {
    let m = v1net_model(16, 6);
    let root = tempfile::tempdir().unwrap();
    let ck = root.path().join("m.ckpt");
    m.to_checkpoint(serde_json::Value::Null).unwrap().save(&ck).unwrap();
    let (img, _) = compose_markedlong(&MarkedLongConfig { size: 16, ..MarkedLongConfig::desk() }, 7, false).unwrap();
    let mut outs = Vec::new();
    for run in 0..2 {
        let loaded = Model::<f32>::from_checkpoint(&Checkpoint::load(&ck).unwrap()).unwrap();
        let d = root.path().join(format!("run{run}"));
        let trace = dump_activations(&loaded, &img, "x", &[1, 2], &d).unwrap();
        let mut files = trace.files.clone();
        files.extend([RAW_FILE.to_string(), TRACE_FILE.to_string()]);
        outs.push(files.iter().map(|f| std::fs::read(d.join(f)).unwrap()).collect::<Vec<_>>());
    }
    assert_eq!(outs[0], outs[1]);
}

#[test]
fn feedforward_models_are_rejected() {
    let m: Model<f32> = build_model(&ModelSpec::for_arch(Arch::Ff1L, 16), 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    assert!(dump_activations(&m, &RgbImage::new(16, 16), "x", &[0], dir.path()).is_err());
    let v = v1net_model(16, 0);
    assert!(dump_activations(&v, &RgbImage::new(16, 16), "x", &[32], dir.path()).is_err());
    assert!(dump_activations(&v, &RgbImage::new(8, 8), "x", &[0], dir.path()).is_err());
}

#[test]
fn normalization_spans_full_range() {
    assert_eq!(normalize_map(&[1.0, 2.0, 3.0]), vec![0, 128, 255]);
    assert_eq!(normalize_map(&[4.0, 4.0]), vec![0, 0]);
}
