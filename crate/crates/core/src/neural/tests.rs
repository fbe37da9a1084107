use super::*;
use crate::cube::{even_wavelengths, Units};
use crate::metrics;
use ndarray::{array, Array1};
use rand::Rng;

fn tiny(levels: usize) -> UnmixerConfig {
    UnmixerConfig {
        patch_size: 8,
        levels,
        base_channels: 3,
        spectral_channels: 4,
        endmembers: 2,
        bands: 5,
        lambda_sad: 0.3,
        lambda_cos: 0.2,
        lambda_ref: 0.0,
        batch_size: 2,
        seed: 11,
        endmember_init: EndmemberInit::Random,
        ..UnmixerConfig::default()
    }
}

fn random_patches(n: usize, p: usize, b: usize, seed: u64) -> Vec<Array3<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Array3::from_shape_fn((p, p, b), |_| rng.gen_range(0.05..1.0)))
        .collect()
}

fn total_loss(state: &UnmixerState, batch: &[Array3<f64>]) -> f64 {
    let out = forward(state, batch).unwrap();
    loss(batch, &out.reconstruction, out.endmembers.view(), &state.config).unwrap().total
}

#[test]
fn build_is_deterministic() {
    let a = build(&tiny(2)).unwrap();
    let b = build(&tiny(2)).unwrap();
    assert_eq!(a.params, b.params);
    let c = build(&UnmixerConfig { seed: 12, ..tiny(2) }).unwrap();
    assert_ne!(a.params, c.params);
}

#[test]
fn parameter_count_closed_form() {
    // encoder conv, spectral 1x1 path, 1x1 head over both, dense endmember head
    let (p, b, e, c, sc) = (8, 7, 3, 4, 5);
    let cfg = UnmixerConfig {
        patch_size: p,
        levels: 1,
        base_channels: c,
        spectral_channels: sc,
        endmembers: e,
        bands: b,
        ..UnmixerConfig::default()
    };
    let want = 9 * b * c + (sc * b + sc) + (e * (c + sc) + e) + (e * b * c + e * b);
    assert_eq!(parameter_count(&cfg), want);
    assert_eq!(build(&cfg).unwrap().parameter_count(), want);
}

#[test]
fn six_by_224_endmember_head() {
    let cfg = UnmixerConfig {
        patch_size: 4,
        levels: 1,
        base_channels: 2,
        endmembers: 6,
        bands: 224,
        ..UnmixerConfig::default()
    };
    let state = build(&cfg).unwrap();
    let out = forward(&state, &random_patches(1, 4, 224, 1)).unwrap();
    assert_eq!(out.endmembers.dim(), (6, 224));
}

#[test]
fn validation_names_the_field() {
    let cases = [
        (UnmixerConfig { patch_size: 6, ..tiny(3) }, "patch_size"),
        (UnmixerConfig { endmembers: 1, ..tiny(1) }, "endmembers"),
        (UnmixerConfig { learning_rate: 0.0, ..tiny(1) }, "learning_rate"),
        (UnmixerConfig { lambda_cos: -1.0, ..tiny(1) }, "lambda_cos"),
        (UnmixerConfig { lambda_ref: 1.0, ..tiny(1) }, "lambda_ref"),
        (UnmixerConfig { bands: 0, ..tiny(1) }, "bands"),
    ];
    for (cfg, field) in cases {
        match build(&cfg) {
            Err(Error::Config(msg)) => assert!(msg.contains(field), "{msg}"),
            other => panic!("{field}: {other:?}"),
        }
    }
    // 2^(levels-1) = 4 divides 12
    build(&UnmixerConfig { patch_size: 12, ..tiny(3) }).unwrap();
}

#[test]
fn forward_outputs_simplex_and_nonnegative_m() {
    for seed in 0..5 {
        let state = build(&UnmixerConfig { seed, ..tiny(2) }).unwrap();
        let out = forward(&state, &random_patches(3, 8, 5, seed + 100)).unwrap();
        for a in &out.abundances {
            for px in a.lanes(ndarray::Axis(2)) {
                assert!((px.sum() - 1.0).abs() < 1e-6);
                assert!(px.iter().all(|v| *v >= 0.0));
            }
        }
        assert!(out.endmembers.iter().all(|v| *v >= 0.0));
    }
    let state = build(&tiny(1)).unwrap();
    assert!(forward(&state, &[]).is_err());
    assert!(forward(&state, &random_patches(1, 8, 4, 0)).is_err());
}

#[test]
fn linear_mix_identities() {
    let m = array![[0.1, 0.2, 0.3], [0.9, 0.8, 0.7]];
    let mut one_hot = Array3::zeros((2, 2, 2));
    one_hot.slice_mut(s![.., .., 1]).fill(1.0);
    let r = linear_mix(one_hot.view(), m.view()).unwrap();
    for px in r.lanes(ndarray::Axis(2)) {
        assert_eq!(px.to_vec(), m.row(1).to_vec());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = Array3::from_shape_fn((3, 4, 2), |_| rng.gen_range(0.0..1.0));
    let fast = linear_mix(a.view(), m.view()).unwrap();
    for i in 0..3 {
        for j in 0..4 {
            for b in 0..3 {
                let mut v = 0.0;
                for e in 0..2 {
                    v += a[[i, j, e]] * m[[e, b]];
                }
                assert!((fast[[i, j, b]] - v).abs() < 1e-15);
            }
        }
    }
    let scaled = linear_mix((&a * 2.0).view(), (&m * 3.0).view()).unwrap();
    for (x, y) in scaled.iter().zip(fast.iter()) {
        assert!((x - 6.0 * y).abs() < 1e-12);
    }
}

#[test]
fn loss_examples() {
    let cfg = UnmixerConfig { lambda_cos: 1.0, ..tiny(1) };
    let x = vec![Array3::from_shape_fn((2, 1, 3), |(i, _, b)| (i + b + 1) as f64)];
    let ortho = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
    let l = loss(&x, &x, ortho.view(), &cfg).unwrap();
    assert_eq!(l.total, 0.0);

    let same = array![[1.0, 2.0, 0.5], [1.0, 2.0, 0.5]];
    let l = loss(&x, &x, same.view(), &cfg).unwrap();
    assert!((l.cos - 1.0).abs() < 1e-12);

    let zero_row = array![[1.0, 2.0, 0.5], [0.0, 0.0, 0.0]];
    assert!(matches!(loss(&x, &x, zero_row.view(), &cfg), Err(Error::ZeroNorm(1))));
}

#[test]
fn loss_agrees_with_metrics_module() {
    let reference = EndmemberSet::unnamed(vec![1.0, 2.0, 3.0], array![[0.2, 0.4, 0.1], [0.5, 0.1, 0.9]]).unwrap();
    let cfg = UnmixerConfig {
        bands: 3,
        lambda_ref: 0.7,
        reference_endmembers: Some(reference.clone()),
        ..tiny(1)
    };
    let x = Array3::from_shape_vec((1, 2, 3), vec![0.3, 0.2, 0.5, 0.9, 0.1, 0.4]).unwrap();
    let xh = Array3::from_shape_vec((1, 2, 3), vec![0.25, 0.3, 0.45, 0.7, 0.2, 0.5]).unwrap();
    let m = array![[0.6, 0.1, 0.8], [0.1, 0.5, 0.2]];
    let l = loss(&[x.clone()], &[xh.clone()], m.view(), &cfg).unwrap();

    let re = metrics::reconstruction_error(x.view(), xh.view()).unwrap();
    let xs = x.clone().into_shape_with_order((2, 3)).unwrap();
    let xhs = xh.into_shape_with_order((2, 3)).unwrap();
    let sad = metrics::sad(xs.view(), xhs.view()).unwrap();
    let cos = metrics::cosine_similarity(&m.row(0).to_vec(), &m.row(1).to_vec()).unwrap();
    let pred = EndmemberSet::unnamed(vec![1.0, 2.0, 3.0], m.clone()).unwrap();
    let perm = metrics::match_endmembers(&pred, &reference).unwrap();
    let reordered = Array2::from_shape_fn((2, 3), |(i, b)| reference.signatures[[perm[i], b]]);
    let ref_sad = metrics::sad(reordered.view(), m.view()).unwrap();
    let want = re + 0.3 * sad + 0.2 * cos + 0.7 * ref_sad;
    assert!((l.re - re).abs() < 1e-14);
    assert!((l.sad - sad).abs() < 1e-14);
    assert!((l.cos - cos).abs() < 1e-14);
    assert!((l.reference - ref_sad).abs() < 1e-14);
    assert!((l.total - want).abs() < 1e-14);
}

fn check_gradients(cfg: UnmixerConfig, samples: usize, seed: u64) -> f64 {
    let mut state = build(&cfg).unwrap();
    let batch = random_patches(cfg.batch_size, cfg.patch_size, cfg.bands, seed);
    let (_, grads) = gradients(&state, &batch).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let bi = rng.gen_range(0..state.params.len());
        let j = rng.gen_range(0..state.params[bi].data.len());
        let orig = state.params[bi].data[j];
        state.params[bi].data[j] = orig + h;
        let up = total_loss(&state, &batch);
        state.params[bi].data[j] = orig - h;
        let down = total_loss(&state, &batch);
        state.params[bi].data[j] = orig;
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads[bi].data[j];
        let scale = analytic.abs().max(numeric.abs());
        if scale > 0.0 {
            worst = worst.max((analytic - numeric).abs() / scale);
        }
    }
    worst
}

#[test]
fn gradients_match_finite_differences() {
    let worst = check_gradients(tiny(1), 60, 3);
    assert!(worst < 1e-4, "relative error {worst}");
    let worst = check_gradients(tiny(2), 60, 4);
    assert!(worst < 1e-4, "relative error {worst}");
}

#[test]
fn gradients_with_reference_term() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let sigs = Array2::from_shape_fn((2, 5), |_| rng.gen_range(0.1..1.0));
    let cfg = UnmixerConfig {
        lambda_ref: 0.5,
        reference_endmembers: Some(EndmemberSet::unnamed(even_wavelengths(5, 400.0, 1000.0), sigs).unwrap()),
        ..tiny(1)
    };
    let worst = check_gradients(cfg, 60, 5);
    assert!(worst < 1e-4, "relative error {worst}");
}

#[test]
fn zero_loss_gives_zero_gradient() {
    let cfg = UnmixerConfig {
        lambda_sad: 0.0,
        lambda_cos: 0.0,
        ..tiny(1)
    };
    let mut state = build(&cfg).unwrap();
    let s = array![0.2, 0.4, 0.6, 0.3, 0.1];
    let sigs = ndarray::stack![ndarray::Axis(0), s, s];
    state.init_endmembers(sigs.view()).unwrap();
    let patch = Array3::from_shape_fn((8, 8, 5), |(_, _, b)| s[b]);
    let (parts, grads) = gradients(&state, &[patch]).unwrap();
    assert!(parts.re < 1e-24);
    for g in &grads {
        assert!(g.data.iter().all(|v| v.abs() < 1e-10), "{}", g.name);
    }
}

#[test]
fn cos_weight_zero_removes_its_gradient() {
    // with lambda_cos = 0 the gradient is that of the remaining terms, so it
    // must not change when only the cosine weight's multiplicand would
    let base = UnmixerConfig { lambda_cos: 0.0, ..tiny(1) };
    let state = build(&base).unwrap();
    let batch = random_patches(2, 8, 5, 8);
    let (p0, g0) = gradients(&state, &batch).unwrap();
    let with_cos = UnmixerState {
        config: UnmixerConfig { lambda_cos: 1.0, ..base.clone() },
        ..state.clone()
    };
    let (p1, g1) = gradients(&with_cos, &batch).unwrap();
    assert!((p1.total - p0.total - p1.cos).abs() < 1e-12);
    let em = em_idx(&base);
    assert_ne!(g0[em + 1].data, g1[em + 1].data);
    for (a, b) in g0.iter().zip(&g1).take(em) {
        // cos depends on M only; the abundance branch sees no difference
        assert!(a.name.starts_with("enc") || a.data == b.data, "{}", a.name);
    }
}

fn synthetic_cube(seed: u64, side: usize, bands: usize, e: usize) -> (HyperCube, Array2<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = Array2::from_shape_fn((e, bands), |_| rng.gen_range(0.05..0.95));
    let data = Array3::from_shape_fn((side, side, e), |_| rng.gen_range(0.0..1.0f64));
    let mut cube = Array3::zeros((side, side, bands));
    for i in 0..side {
        for j in 0..side {
            let a = data.slice(s![i, j, ..]);
            let a = &a / a.sum();
            let px: Array1<f64> = a.dot(&m);
            cube.slice_mut(s![i, j, ..]).assign(&px);
        }
    }
    let wl = even_wavelengths(bands, 400.0, 1000.0);
    (HyperCube::new(cube, wl, Units::Reflectance).unwrap(), m)
}

fn train_cfg() -> UnmixerConfig {
    UnmixerConfig {
        patch_size: 8,
        levels: 2,
        base_channels: 4,
        endmembers: 3,
        bands: 6,
        batch_size: 4,
        max_epochs: 6,
        learning_rate: 1e-2,
        seed: 2,
        ..UnmixerConfig::default()
    }
}

#[test]
fn zero_epochs_is_a_no_op() {
    let (cube, _) = synthetic_cube(1, 16, 6, 3);
    let cfg = UnmixerConfig { max_epochs: 0, ..train_cfg() };
    let state = build(&cfg).unwrap();
    let before = state.params.clone();
    let (after, report) = train(state, &cube, &cfg).unwrap();
    assert_eq!(report.epochs_run, 0);
    assert!(report.loss_trace.is_empty());
    assert!(!report.converged);
    assert_eq!(after.params, before);
    assert_eq!(after.step, 0);
}

#[test]
fn training_is_deterministic_and_resumable() {
    let (cube, _) = synthetic_cube(1, 16, 6, 3);
    let cfg = train_cfg();
    let (a, ra) = train(build(&cfg).unwrap(), &cube, &cfg).unwrap();
    let (b, rb) = train(build(&cfg).unwrap(), &cube, &cfg).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(a.params, b.params);
    for t in &ra.loss_trace {
        let want = t.re + cfg.lambda_sad * t.sad + cfg.lambda_cos * t.cos + cfg.lambda_ref * t.reference;
        assert!((t.total - want).abs() < 1e-12);
    }

    let half = UnmixerConfig { max_epochs: 3, ..cfg.clone() };
    let (h, rh) = train(build(&cfg).unwrap(), &cube, &half).unwrap();
    assert_eq!(rh.epochs_run, 3);
    let steps = h.step;
    let (full, rest) = train(h, &cube, &cfg).unwrap();
    assert_eq!(rest.epochs_run, 3);
    assert_eq!(full.step, 2 * steps);
    assert_eq!(full.params, a.params);
    assert_eq!(rest.loss_trace[..], ra.loss_trace[3..]);
}

#[test]
fn warmup_holds_the_endmember_branch() {
    let (cube, _) = synthetic_cube(1, 16, 6, 3);
    let cfg = UnmixerConfig {
        endmember_warmup_epochs: 2,
        max_epochs: 2,
        ..train_cfg()
    };
    let (warm, _) = train(build(&cfg).unwrap(), &cube, &cfg).unwrap();
    let mut init = build(&cfg).unwrap();
    let vca = crate::vca::vca_extract(&cube, 3, cfg.seed).unwrap();
    init.init_endmembers(vca.signatures.view()).unwrap();
    for (a, b) in warm.params.iter().zip(&init.params) {
        assert_eq!(a.name.starts_with("endmember."), a.data == b.data, "{}", a.name);
    }
    let more = UnmixerConfig { max_epochs: 3, ..cfg };
    let (after, _) = train(warm.clone(), &cube, &more).unwrap();
    let moved = after.params.iter().zip(&warm.params).filter(|(a, b)| a.name.starts_with("endmember.") && a.data != b.data);
    assert_eq!(moved.count(), 2);
}

#[test]
fn checkpoint_round_trip() {
    let (cube, _) = synthetic_cube(1, 16, 6, 3);
    let cfg = UnmixerConfig { max_epochs: 2, ..train_cfg() };
    let (state, _) = train(build(&cfg).unwrap(), &cube, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&state, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.step, state.step);
    assert_eq!(back.epoch, state.epoch);
    assert_eq!(back.config, state.config);
    for (p, q) in back.params.iter().zip(&state.params) {
        assert_eq!(p.name, q.name);
        for (x, y) in p.data.iter().zip(&q.data) {
            assert_eq!(*x, *y as f32 as f64);
        }
    }
    save_checkpoint(&back, dir.path().join("again.ckpt")).unwrap();
    assert_eq!(std::fs::read(dir.path().join("again.ckpt")).unwrap(), bytes);

    let more = UnmixerConfig { max_epochs: 3, ..cfg };
    let (resumed, report) = train(back, &cube, &more).unwrap();
    assert_eq!(report.epochs_run, 1);
    assert!(resumed.step > state.step);

    std::fs::write(&path, b"garbage").unwrap();
    assert!(load_checkpoint(&path).is_err());
}

#[test]
fn diverging_run_reports_trace() {
    let (cube, _) = synthetic_cube(1, 16, 6, 3);
    let cfg = UnmixerConfig {
        learning_rate: 1e12,
        max_epochs: 50,
        ..train_cfg()
    };
    match train(build(&cfg).unwrap(), &cube, &cfg) {
        Err(Error::Diverged { trace, epoch, .. }) => assert_eq!(trace.len(), epoch),
        Ok((_, r)) => panic!("no divergence in {} epochs", r.epochs_run),
        Err(e) => panic!("{e}"),
    }
}

#[test]
fn infer_shapes_simplex_and_determinism() {
    let (cube, _) = synthetic_cube(3, 13, 6, 3);
    let cfg = UnmixerConfig { max_epochs: 1, ..train_cfg() };
    let (state, _) = train(build(&cfg).unwrap(), &cube, &cfg).unwrap();
    let (a, m) = infer(&state, &cube).unwrap();
    assert_eq!((a.dim().0, a.dim().1), (13, 13));
    assert_eq!(m.signatures.dim(), (3, 6));
    for px in a.values.lanes(ndarray::Axis(2)) {
        assert!((px.sum() - 1.0).abs() < 1e-6);
    }
    let (a2, m2) = infer(&state, &cube).unwrap();
    assert_eq!(a, a2);
    assert_eq!(m, m2);
}

#[test]
fn trace_csv_layout() {
    let t = [EpochLoss {
        epoch: 0,
        re: 0.5,
        sad: 0.25,
        cos: 0.125,
        reference: 0.0,
        total: 1.0,
    }];
    assert_eq!(trace_csv(&t), "epoch,re,sad,cos,ref,total\n0,0.5,0.25,0.125,0,1\n");
}
