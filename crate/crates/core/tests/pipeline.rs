use spair::io::{checkpoint, pnm, Config};
use spair::metrics::{error_reduction, mask_prf, psnr};
use spair::nets::{ablation_variant, build_net_l, build_net_r, param_count, NetSpec, Role, Variant};
use spair::synth::{make_dataset, parse_manifest, regenerate, Kind, Rng};
use spair::tensor::{Mask, Shape, Tensor};
use spair::train::{log_text, train_localize, train_restore, AdamState, Phase, TrainConfig, TrainData};
use spair::Error;

fn tiny_config() -> TrainConfig {
    let mut cfg = TrainConfig {
        net: NetSpec {
            levels: 2,
            base_channels: 4,
            dense_depth: 2,
            growth: 4,
            sc_growth: 4,
            ..NetSpec::default()
        },
        epochs: 2,
        iters_per_epoch: 3,
        batch_size: 2,
        patch_size: 16,
        log_every: 2,
        val_every: 3,
        ..TrainConfig::default()
    };
    cfg.data.train_samples = 4;
    cfg.data.val_samples = 2;
    cfg.data.image_size = 24;
    cfg
}

#[test]
fn datasets_are_reproducible() {
    let a = make_dataset(6, &Kind::ALL, 42, 32, 40).unwrap();
    let b = make_dataset(6, &Kind::ALL, 42, 32, 40).unwrap();
    assert_eq!(a.samples, b.samples);
    assert_eq!(a.manifest_text(), b.manifest_text());
    let again = regenerate(&parse_manifest(&a.manifest_text()).unwrap()).unwrap();
    assert_eq!(again, a.samples);
    let c = make_dataset(6, &Kind::ALL, 43, 32, 40).unwrap();
    assert_ne!(a.samples, c.samples);
    for s in &a.samples {
        let f = s.gt_mask.fraction();
        assert!(f > 0.0 && f <= 0.5, "{:?} fraction {f}", s.kind);
    }
}

#[test]
fn checkpoints_round_trip_exactly() {
    let net = build_net_r::<f32>(&NetSpec::default(), 3).unwrap();
    let bytes = checkpoint::encode(net.params()).unwrap();
    let back = checkpoint::decode::<f32>(&bytes).unwrap();
    assert_eq!(&back, net.params());
    assert_eq!(checkpoint::encode(&back).unwrap(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.sptn");
    checkpoint::save(&path, net.params()).unwrap();
    assert_eq!(&checkpoint::load::<f32>(&path).unwrap(), net.params());

    assert!(checkpoint::decode::<f64>(&bytes).is_err());
    assert!(checkpoint::decode::<f32>(&bytes[..bytes.len() - 1]).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(checkpoint::decode::<f32>(&extra).is_err());
    let mut bad = bytes;
    bad[0] = b'X';
    assert!(matches!(checkpoint::decode::<f32>(&bad), Err(Error::Parse { .. })));
}

#[test]
fn pnm_round_trips_exactly() {
    let mut rng = Rng::new(5);
    let img = Tensor::from_fn(Shape::new(1, 3, 7, 9), |_, _, _, _| rng.below(256) as f32 / 255.0);
    let ppm = pnm::encode_ppm(&img, 0).unwrap();
    let back = pnm::decode(&ppm).unwrap();
    assert_eq!(back, img);
    assert_eq!(pnm::encode_ppm(&back, 0).unwrap(), ppm);

    let gray = Tensor::from_fn(Shape::new(1, 1, 5, 4), |_, _, _, _| rng.below(256) as f32 / 255.0);
    let pgm = pnm::encode_pgm(&gray, 0).unwrap();
    assert_eq!(pnm::decode(&pgm).unwrap(), gray);

    let mask = Mask::from_fn(1, 6, 5, |_, y, x| (y + x) % 3 == 0);
    assert_eq!(pnm::decode_mask(&pnm::encode_mask(&mask, 0).unwrap()).unwrap(), mask);

    assert!(pnm::decode(b"P6\n2 2\n255\n\x00").is_err());
    assert!(pnm::decode(b"P3\n1 1\n255\n0 0 0").is_err());
}

#[test]
fn config_text_round_trips() {
    let cfg = Config::parse("learning_rate = 1e-3\nnet.variant = net3\n# comment\ndata.kinds = blob,streak\n").unwrap();
    assert_eq!(cfg.train.learning_rate, 1e-3);
    assert_eq!(cfg.train.net.variant, Variant::Net3);
    assert_eq!(Config::parse(&cfg.to_text()).unwrap(), cfg);
    assert!(matches!(Config::parse("no_such_key = 1"), Err(Error::Config(_))));
    assert!(Config::parse("seed = 1\nseed = 2").is_err());
}

#[test]
fn net1_matches_guided_budget() {
    let spec = NetSpec::default();
    let net1 = ablation_variant(&spec, Variant::Net1).unwrap();
    let budget = param_count(&ablation_variant(&spec, Variant::Net2).unwrap(), Role::Restore)
        + param_count(&spec.localizer(), Role::Localize);
    let got = param_count(&net1, Role::Restore);
    let rel = (got as f64 - budget as f64).abs() / budget as f64;
    assert!(rel <= 0.05, "Net1 {got} vs budget {budget}");
    let l = build_net_l::<f32>(&spec, 0).unwrap();
    assert!(l.param_count() < build_net_r::<f32>(&spec, 0).unwrap().param_count());
}

#[test]
fn adam_first_step_moves_by_lr() {
    let p = vec![Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![1.0f64, -2.0, 0.5]).unwrap()];
    let g = vec![Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![0.3f64, -4.0, 1e-3]).unwrap()];
    let mut st = AdamState::new(&p);
    let mut q = p.clone();
    st.update(&mut q, &g, 0.01).unwrap();
    for ((a, b), gv) in q[0].data().iter().zip(p[0].data()).zip(g[0].data()) {
        let d = a - b;
        assert!((d + 0.01 * gv.signum()).abs() < 1e-6, "step {d}");
    }
    let bad = vec![Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![f64::NAN, 0.0, 0.0]).unwrap()];
    let before = q.clone();
    assert!(matches!(st.update(&mut q, &bad, 0.01), Err(Error::NonFinite(_))));
    assert_eq!(q, before);
}

#[test]
fn training_is_bitwise_reproducible() {
    let cfg = tiny_config();
    let data = TrainData::generate(&cfg.data).unwrap();
    let loc_cfg = TrainConfig {
        phase: Phase::Localize,
        ..cfg.clone()
    };
    let a = train_localize(&loc_cfg, &data).unwrap();
    let b = train_localize(&loc_cfg, &TrainData::generate(&cfg.data).unwrap()).unwrap();
    assert_eq!(checkpoint::encode(a.net.params()).unwrap(), checkpoint::encode(b.net.params()).unwrap());
    assert_eq!(log_text(&a.log), log_text(&b.log));

    let r1 = train_restore(&cfg, &data, Some(&a.net)).unwrap();
    let r2 = train_restore(&cfg, &data, Some(&b.net)).unwrap();
    assert_eq!(checkpoint::encode(r1.net.params()).unwrap(), checkpoint::encode(r2.net.params()).unwrap());
    assert_eq!(log_text(&r1.log), log_text(&r2.log));
    assert!(r1.log.iter().any(|r| r.val_psnr.is_some()));
    assert!(r1.losses.iter().all(|l| l.is_finite()));
}

#[test]
fn metric_examples() {
    let a = Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![0.0f64, 0.0]).unwrap();
    let b = Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![0.1f64, 0.1]).unwrap();
    assert!((psnr(&a, &b, 1.0, None).unwrap() - 20.0).abs() < 1e-12);
    assert_eq!(error_reduction(30.0, 30.0, 0.9, 0.9), (0.0, 0.0));

    let mut gt = Mask::<f64>::zeros(1, 16, 16);
    for y in 6..10 {
        for x in 6..10 {
            gt.set(0, y, x, true);
        }
    }
    let pred = Mask::from_fn(1, 16, 16, |_, y, x| (5..11).contains(&y) && (5..11).contains(&x));
    let s = mask_prf(&pred, &gt).unwrap();
    assert_eq!(s.recall, 1.0);
    assert_eq!(s.precision, 16.0 / 36.0);
    let f1 = 2.0 * s.precision / (s.precision + 1.0);
    assert!((s.f1 - f1).abs() < 1e-15);
}
