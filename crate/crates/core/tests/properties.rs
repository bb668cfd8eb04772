use anyseg::autodiff::{Graph, Op, Tensor, Var};
use anyseg::data::{generate_scene, render_modality, RenderParams, SceneConfig};
use anyseg::harness::{
    compute_miou, evaluate_with, parse_metrics, ExperimentConfig, LossToggles, LrSchedule, MetricRecord, MetricsWriter,
    OptimizerConfig,
};
use anyseg::losses::{anymodal_dropout, cmd_loss, fused_kd_loss, mad_loss, umd_loss, DistillSample, LossReport};
use anyseg::modality::{all_subsets, Modality, ModalityMask};
use anyseg::segmentor::{checkpoint_bytes, parse_checkpoint, pml_fuse, ModelShape, MultiScaleFeatures, SegmentorParams};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SENSORS: [Modality; 4] = [Modality::Rgb, Modality::Depth, Modality::Event, Modality::Lidar];
const STAGES: [[usize; 3]; 4] = [[2, 2, 3], [2, 1, 2], [1, 2, 4], [1, 1, 2]];
const STAGE_LEN: usize = 12 + 4 + 8 + 2;

fn stage_vars(g: &mut Graph<f64>, flat: &[f64]) -> [Var; 4] {
    let mut offset = 0;
    std::array::from_fn(|s| {
        let n: usize = STAGES[s].iter().product();
        let t = Tensor::new(&STAGES[s], flat[offset..offset + n].to_vec()).unwrap();
        offset += n;
        g.constant(t)
    })
}

fn features(g: &mut Graph<f64>, mask: ModalityMask, flat: &[Vec<f64>]) -> MultiScaleFeatures {
    let mut f = MultiScaleFeatures::new();
    for (i, m) in SENSORS.iter().enumerate() {
        if mask.contains(*m) {
            let v = stage_vars(g, &flat[i]);
            f.insert(*m, v);
        }
    }
    f
}

fn value(g: &Graph<f64>, v: Var) -> f64 {
    g.value(v).item().unwrap()
}

fn feature_sets() -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-6.0..6.0f64, STAGE_LEN), 4)
}

fn mask() -> impl Strategy<Value = ModalityMask> {
    (1usize..16).prop_map(|s| ModalityMask::from_selector(&SENSORS, s).unwrap())
}

fn softmax_rows(logits: Vec<f64>, k: usize) -> Tensor<f64> {
    let t = Tensor::new(&[logits.len() / k, k], logits).unwrap();
    Op::Softmax(1).forward(&[&t]).unwrap()
}

proptest! {
    #[test]
    fn distillation_terms_are_divergences(
        s in feature_sets(),
        t in feature_sets(),
        m in mask(),
        m2 in mask(),
        logits in prop::collection::vec(-10.0..10.0f64, 12),
        logits2 in prop::collection::vec(-10.0..10.0f64, 12),
    ) {
        let mut g = Graph::<f64>::new();
        let sf = features(&mut g, m, &s);
        let tf = features(&mut g, ModalityMask::new(SENSORS).unwrap(), &t);
        let sf_same = features(&mut g, ModalityMask::new(SENSORS).unwrap(), &s);

        let umd = umd_loss(&mut g, &sf, &tf, m).unwrap();
        prop_assert!(value(&g, umd) >= -1e-9);
        let umd_eq = umd_loss(&mut g, &sf, &sf_same, m).unwrap();
        prop_assert!(value(&g, umd_eq).abs() <= 1e-9);

        let sf2 = features(&mut g, m2, &t);
        let batch = [
            DistillSample { student: &sf, teacher: &tf, mask: m },
            DistillSample { student: &sf2, teacher: &sf_same, mask: m2 },
        ];
        let cmd = cmd_loss(&mut g, &batch).unwrap().loss;
        prop_assert!(value(&g, cmd) >= -1e-9);
        let same = [
            DistillSample { student: &sf, teacher: &sf, mask: m },
            DistillSample { student: &sf2, teacher: &sf2, mask: m2 },
        ];
        let cmd_eq = cmd_loss(&mut g, &same).unwrap().loss;
        prop_assert!(value(&g, cmd_eq).abs() <= 1e-9);

        let p = g.constant(softmax_rows(logits, 3));
        let q = g.constant(softmax_rows(logits2, 3));
        let mad = mad_loss(&mut g, p, q).unwrap();
        prop_assert!(value(&g, mad) >= -1e-9);
        let mad_eq = mad_loss(&mut g, p, p).unwrap();
        prop_assert!(value(&g, mad_eq).abs() <= 1e-9);

        let a = stage_vars(&mut g, &s[0]);
        let b = stage_vars(&mut g, &t[0]);
        let fkd = fused_kd_loss(&mut g, &a, &b).unwrap();
        prop_assert!(value(&g, fkd) >= -1e-9);
        let fkd_eq = fused_kd_loss(&mut g, &a, &a).unwrap();
        prop_assert!(value(&g, fkd_eq).abs() <= 1e-9);
    }

    #[test]
    fn pml_fuse_is_order_free_mean(s in feature_sets(), m in mask(), rotate in 0usize..4) {
        let fuse = |order: &[Modality]| -> Vec<u64> {
            let mut g = Graph::<f64>::new();
            let mut f = MultiScaleFeatures::new();
            for &mo in order {
                let i = SENSORS.iter().position(|&x| x == mo).unwrap();
                let v = stage_vars(&mut g, &s[i]);
                f.insert(mo, v);
            }
            pml_fuse(&mut g, &f)
                .unwrap()
                .iter()
                .flat_map(|&v| g.value(v).data().iter().map(|x| x.to_bits()).collect::<Vec<_>>())
                .collect()
        };
        let mut order: Vec<Modality> = m.iter().collect();
        let canonical = fuse(&order);
        let len = order.len();
        order.rotate_left(rotate % len);
        prop_assert_eq!(&canonical, &fuse(&order));
        for (i, bits) in canonical.iter().enumerate() {
            let mean = m
                .iter()
                .map(|mo| s[SENSORS.iter().position(|&x| x == mo).unwrap()][i])
                .sum::<f64>()
                / len as f64;
            prop_assert!((f64::from_bits(*bits) - mean).abs() <= 1e-12);
        }
    }

    #[test]
    fn dropout_draws_nonempty_subsets(seed in any::<u64>(), m in 1usize..=5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let modalities = &Modality::ALL[..m];
        for _ in 0..50 {
            let mask = anymodal_dropout(&mut rng, modalities).unwrap();
            prop_assert!(!mask.is_empty());
            prop_assert!(mask.is_subset_of(modalities));
        }
    }

    #[test]
    fn subsets_are_distinct_and_ordered(m in 1usize..=5) {
        let subsets = all_subsets(&Modality::ALL[..m]);
        prop_assert_eq!(subsets.len(), (1 << m) - 1);
        for pair in subsets.windows(2) {
            let key = |s: &ModalityMask| (s.len(), s.iter().collect::<Vec<_>>());
            prop_assert!(key(&pair[0]) < key(&pair[1]));
        }
    }

    #[test]
    fn miou_is_bounded_and_exact_on_identity(
        k in 2usize..6,
        pred in prop::collection::vec(0u8..6, 16),
        truth in prop::collection::vec(0u8..6, 16),
    ) {
        let clip = |v: Vec<u8>| v.into_iter().map(|x| x % k as u8).collect::<Vec<_>>();
        let (pred, truth) = (clip(pred), clip(truth));
        let r = compute_miou(&pred, &truth, k).unwrap();
        prop_assert!((0.0..=1.0).contains(&r.miou));
        let same = compute_miou(&truth, &truth, k).unwrap();
        prop_assert_eq!(same.miou, 1.0);
        prop_assert!(compute_miou(&pred[..15], &truth, k).is_err());
    }

    #[test]
    fn lr_schedule_shape(epochs in 0usize..80, steps in 1usize..30, base in 1e-6..1.0f64) {
        let cfg = OptimizerConfig { epochs, learning_rate: base, ..OptimizerConfig::default() };
        let s = LrSchedule::new(&cfg, steps);
        prop_assert!(s.warmup_steps < s.total_steps.max(1));
        for t in 0..s.warmup_steps {
            prop_assert_eq!(s.rate(t), 0.1 * base);
        }
        if s.total_steps > 0 {
            prop_assert_eq!(s.rate(s.warmup_steps), base);
        }
        for t in s.warmup_steps..s.total_steps {
            prop_assert!(s.rate(t + 1) <= s.rate(t));
            let tt = (t - s.warmup_steps) as f64;
            let total = (s.total_steps - s.warmup_steps) as f64;
            prop_assert!((s.rate(t) - base * (1.0 - tt / total).powf(0.9)).abs() <= 1e-15 * base.max(1.0));
        }
    }

    #[test]
    fn config_round_trips(
        lr in 1e-8..1.0f64,
        epochs in 0usize..500,
        batch in 1usize..64,
        lambda in 0.0..100.0f64,
        alpha in 0.0..10.0f64,
        beta in 0.0..20.0f64,
        seeds in any::<(u64, u64, u64)>(),
        toggles in 0u8..32,
    ) {
        let mut cfg = ExperimentConfig::desk();
        cfg.optimizer.learning_rate = lr;
        cfg.optimizer.epochs = epochs;
        cfg.optimizer.batch_size = batch;
        cfg.loss.lambda_mad = lambda;
        cfg.loss.alpha = alpha;
        cfg.loss.beta = beta;
        (cfg.seeds.data, cfg.seeds.eval_data, cfg.seeds.train) = seeds;
        let names = ["sup", "mad", "umd", "cmd", "fused_kd"];
        let csv: Vec<&str> = (0..5).filter(|i| toggles >> i & 1 == 1).map(|i| names[i]).collect();
        cfg.toggles = if csv.is_empty() { "none".parse().unwrap() } else { csv.join(",").parse::<LossToggles>().unwrap() };
        let text = cfg.to_toml().unwrap();
        prop_assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn checkpoint_round_trip_and_corruption(seed in any::<u64>(), frozen in any::<bool>(), flip in any::<prop::sample::Index>()) {
        let mut p = SegmentorParams::<f32>::init(&ModelShape::default(), seed).unwrap();
        if frozen {
            p.freeze();
        }
        let bytes = checkpoint_bytes(&p);
        let back = parse_checkpoint(&bytes).unwrap();
        prop_assert_eq!(&back, &p);
        prop_assert_eq!(checkpoint_bytes(&back), bytes.clone());
        let mut bad = bytes.clone();
        let i = flip.index(bad.len());
        bad[i] ^= 0x04;
        prop_assert!(parse_checkpoint(&bad).is_err());
        prop_assert!(parse_checkpoint(&bytes[..i]).is_err());
    }

    #[test]
    fn rendering_is_a_pure_function(seed in any::<u64>(), k in 2usize..7) {
        let cfg = SceneConfig { num_classes: k, ..SceneConfig::default() };
        let a = generate_scene(seed, &cfg).unwrap();
        prop_assert_eq!(&a, &generate_scene(seed, &cfg).unwrap());
        for (m, img) in &a.images {
            let again = render_modality(&a.labels, a.height, a.width, k, *m, seed, &RenderParams::default()).unwrap();
            prop_assert_eq!(img, &again);
            prop_assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        for c in 0..k as u8 {
            prop_assert!(a.labels.contains(&c));
        }
    }

    #[test]
    fn metrics_prefix_survives_truncation(n in 1usize..20, cut in any::<prop::sample::Index>()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let mut w = MetricsWriter::create(&path).unwrap();
        for i in 0..n {
            let report = LossReport { sup: i as f64, total: i as f64, ..LossReport::default() };
            w.append(&MetricRecord::Step { epoch: 0, step: i, lr: 1e-3, masks: vec!["RD".into()], report }).unwrap();
        }
        let text = std::fs::read_to_string(&path).unwrap();
        let at = cut.index(text.len() + 1);
        let prefix = parse_metrics(&text[..at]).unwrap();
        let complete = text[..at].matches('\n').count();
        prop_assert_eq!(prefix.len(), complete);
        for (i, r) in prefix.iter().enumerate() {
            let is_step = matches!(r, MetricRecord::Step { step, .. } if *step == i);
            prop_assert!(is_step);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn eval_table_covers_subsets_and_mean(m in 1usize..=4, seed in any::<u64>()) {
        let cfg = SceneConfig { modalities: SENSORS[..m].to_vec(), ..SceneConfig::default() };
        let ds = anyseg::data::generate_dataset(&cfg, 3, seed).unwrap();
        let table = evaluate_with(&ds, |mask, s| {
            Ok((0..s.labels.len() / 4).map(|i| ((i + mask.len()) % 4) as u8).collect())
        })
        .unwrap();
        prop_assert_eq!(table.rows.len(), (1 << m) - 1);
        let mean = table.rows.iter().map(|r| r.result.miou).sum::<f64>() / table.rows.len() as f64;
        prop_assert!((table.mean - mean).abs() <= 1e-9);
    }
}
