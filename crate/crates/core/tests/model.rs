use quantsmooth::model::*;
use quantsmooth::qlinear::{QuantScheme, Variant};
use quantsmooth::quantizer::BitWidth;
use quantsmooth::rng::{gen_gaussian, SeededRng};
use quantsmooth::sampling::frame_corr_vector;
use quantsmooth::tensor::{excess_kurtosis, Tensor};

fn default_model() -> ToyModel {
    ToyModel::new(ToyModelConfig::default()).unwrap()
}

fn small_cfg() -> ToyModelConfig {
    ToyModelConfig {
        d: 16,
        s: 4,
        f: 3,
        n_blocks: 2,
        heads: 2,
        ..Default::default()
    }
}

#[test]
fn config_rejects_unknown_keys_and_bad_shapes() {
    let err = serde_json::from_str::<ToyModelConfig>(r#"{"d": 64, "depth": 3}"#);
    assert!(err.is_err());
    let cfg: ToyModelConfig = serde_json::from_str(r#"{"d": 32}"#).unwrap();
    assert_eq!((cfg.d, cfg.s, cfg.f), (32, 16, 4));
    assert!(ToyModel::new(ToyModelConfig { d: 48, ..Default::default() }).is_err());
    assert!(ToyModel::new(ToyModelConfig { heads: 3, ..Default::default() }).is_err());
    assert_eq!(ToyModelConfig::default().tokens_per_scene(), 84);
}

#[test]
fn model_is_deterministic_with_distinct_special_sets() {
    let a = default_model();
    assert_eq!(a, default_model());
    let b = ToyModel::new(ToyModelConfig { seed: 1, ..Default::default() }).unwrap();
    assert_ne!(a, b);
    let (tf, to) = a.special_tokens();
    assert_ne!(tf, to);
    assert_eq!(tf.shape(), [SPECIAL_TOKENS, 64]);
    assert_eq!(a.outlier_channels().len(), 4);
}

#[test]
fn registration_layout() {
    let cfg = ToyModelConfig {
        d: 8,
        s: 16,
        f: 3,
        heads: 2,
        ..Default::default()
    };
    let model = ToyModel::new(cfg.clone()).unwrap();
    let scene = gen_scene(&cfg, 0, &mut SeededRng::new(4)).unwrap();
    let x = model.register(&scene).unwrap();
    assert_eq!(x.shape(), [63, 8]);
    let (tf, to) = model.special_tokens();
    for r in 0..SPECIAL_TOKENS {
        assert_eq!(x.row(16 + r), tf.row(r));
        assert_eq!(x.row(21 + 16 + r), to.row(r));
        assert_eq!(x.row(42 + 16 + r), to.row(r));
    }
    for (t, frame) in scene.frames.iter().enumerate() {
        for p in 0..16 {
            assert_eq!(x.row(t * 21 + p), frame.row(p));
        }
    }
    let bad: Tensor = Tensor::zeros(&[4, 8]).unwrap();
    assert!(register_tokens(&scene, &bad, to).is_err());
}

#[test]
fn forward_is_deterministic_and_shaped() {
    let model = default_model();
    let scene = gen_scene(model.config(), 2, &mut SeededRng::new(9)).unwrap();
    let a = model.forward(&scene).unwrap();
    let b = model.forward(&scene).unwrap();
    assert_eq!(a.output, b.output);
    assert_eq!(a.block_inputs.len(), 8);
    assert_eq!(a.output.shape(), [84, 64]);
    assert_eq!(a.block_inputs[0], model.register(&scene).unwrap());
}

#[test]
fn zero_scene_gives_constant_rows() {
    let cfg = ToyModelConfig::default();
    let zero: Tensor = Tensor::zeros(&[SPECIAL_TOKENS, cfg.d]).unwrap();
    let model = default_model().with_special_tokens(zero.clone(), zero).unwrap();
    let frames = (0..cfg.f).map(|_| Tensor::zeros(&[cfg.s, cfg.d]).unwrap()).collect();
    let scene = Scene::new(0, frames).unwrap();
    let x = model.register(&scene).unwrap();
    let block = &model.blocks()[0];
    let trace = block.forward_fp(&cfg, &x).unwrap();
    // A zero row normalizes to the normalization offset; every later
    // activation is then the same row for every token.
    for i in 0..x.rows() {
        assert_eq!(trace.n1.row(i), block.norm_bias.as_slice());
    }
    let out = model.forward(&scene).unwrap().output;
    for i in 1..out.rows() {
        assert_eq!(out.row(i), out.row(0));
    }
}

#[test]
fn frame_blocks_do_not_mix_frames() {
    let model = default_model();
    let cfg = model.config();
    let block = &model.blocks()[0];
    assert_eq!(block.kind, BlockKind::Frame);
    let scene = gen_scene(cfg, 1, &mut SeededRng::new(2)).unwrap();
    let x = model.register(&scene).unwrap();
    let per = cfg.tokens_per_frame();
    let order = [2, 0, 3, 1];
    let parts: Vec<Tensor> = order
        .iter()
        .map(|&t| x.slice_rows(t * per, (t + 1) * per).unwrap())
        .collect();
    let permuted = Tensor::vstack(&parts).unwrap();
    let out = block.forward_fp(cfg, &x).unwrap().out;
    let out_p = block.forward_fp(cfg, &permuted).unwrap().out;
    for (new, &old) in order.iter().enumerate() {
        for r in 0..per {
            assert_eq!(out_p.row(new * per + r), out.row(old * per + r));
        }
    }
    // A global block does mix them.
    let global = &model.blocks()[1];
    assert_eq!(global.kind, BlockKind::Global);
    let mut y = x.data().to_vec();
    y[per * cfg.d] += 1.0;
    let y = Tensor::matrix(x.rows(), x.cols(), y).unwrap();
    let a = global.forward_fp(cfg, &x).unwrap().out;
    let b = global.forward_fp(cfg, &y).unwrap().out;
    assert_ne!(a.row(0), b.row(0));
}

#[test]
fn resume_matches_full_pass() {
    let cfg = small_cfg();
    let model = ToyModel::new(cfg.clone()).unwrap();
    let pool = gen_pool(&cfg, 2, 2, 0.0, 3).unwrap();
    let x = model.register_batch(&pool).unwrap();
    let block = &model.blocks()[1];
    let q = quantize_model(&model, &pool, QuantScheme::new(Variant::Dsfq, BitWidth::Int4, BitWidth::Int4)).unwrap();
    let fp = block.forward_fp(&cfg, &x).unwrap();
    let qlins = q.blocks[1].lins();
    for from in 0..4 {
        let [a, b, c, d] = block.linears();
        let mut lins: [&dyn Linear; 4] = [a, b, c, d];
        for (i, l) in lins.iter_mut().enumerate().skip(from) {
            *l = qlins[i];
        }
        let want = block.forward_with(&cfg, &x, lins).unwrap().out;
        assert_eq!(block.resume(&cfg, &fp, from, lins).unwrap(), want);
    }
}

#[test]
fn special_tokens_dominate_deep_blocks() {
    let model = default_model();
    let cfg = model.config();
    let pool = gen_pool(cfg, 4, 2, 0.0, 0).unwrap();
    let trace = model.forward_tokens(&model.register_batch(&pool).unwrap()).unwrap();
    let per = cfg.tokens_per_frame();
    for b in 4..cfg.n_blocks {
        let a = &trace.block_inputs[b];
        let mut special = 0.0f64;
        let mut patch = Vec::new();
        for i in 0..a.rows() {
            let m = a.row(i).iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
            if i % per >= cfg.s {
                special = special.max(m);
            } else {
                patch.push(m);
            }
        }
        patch.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let median = patch[patch.len() / 2];
        assert!(special >= 5.0 * median, "block {b}: {special} vs {median}");
    }
    let first = excess_kurtosis(&trace.block_inputs[1]).unwrap();
    let deep = excess_kurtosis(&trace.block_inputs[cfg.n_blocks - 1]).unwrap();
    assert!(deep > first, "{deep} vs {first}");
}

#[test]
fn pool_outliers_and_domains() {
    let cfg = ToyModelConfig::default();
    let pool = gen_pool(&cfg, 4, 25, 0.05, 7).unwrap();
    assert_eq!(pool.len(), 100);
    assert_eq!(pool.iter().filter(|s| s.is_outlier()).count(), 5);
    for (i, s) in pool.iter().enumerate() {
        assert_eq!(s.id, i);
        assert_eq!(s.domain_id(), Some(i % 4));
    }
    assert_eq!(pool, gen_pool(&cfg, 4, 25, 0.05, 7).unwrap());
    assert!(gen_pool(&cfg, 4, 25, 0.0, 7).unwrap().iter().all(|s| !s.is_outlier()));
    assert!(gen_pool(&cfg, 4, 25, 0.3, 7).is_err());
    // Outliers are inflated copies of what the clean generator would emit.
    let clean = gen_pool(&cfg, 4, 25, 0.0, 7).unwrap();
    for (a, b) in pool.iter().zip(&clean) {
        if a.is_outlier() {
            assert!(a.frames[0].max_abs() > 3.0 * b.frames[0].max_abs());
        } else {
            assert_eq!(a.frames, b.frames);
        }
    }
}

#[test]
fn scene_frame_correlation_follows_profile() {
    let cfg = ToyModelConfig::default();
    for domain in 0..4 {
        let rho = DomainProfile::for_domain(domain, cfg.f).rho;
        let mut rng = SeededRng::new(30 + domain as u64);
        let mut mean = vec![0.0; cfg.f - 1];
        for _ in 0..20 {
            let scene = gen_scene(&cfg, domain, &mut rng).unwrap();
            let base = scene.frames[0].data();
            let n0 = base.iter().map(|v| v * v).sum::<f64>().sqrt();
            for t in 1..cfg.f {
                let ft = scene.frames[t].data();
                let nt = ft.iter().map(|v| v * v).sum::<f64>().sqrt();
                mean[t - 1] += base.iter().zip(ft).map(|(a, b)| a * b).sum::<f64>() / (n0 * nt) / 20.0;
            }
        }
        for (m, r) in mean.iter().zip(&rho) {
            assert!((m - r).abs() < 0.05, "domain {domain}: {m} vs {r}");
        }
    }
}

#[test]
fn domains_separate_in_feature_space() {
    let model = default_model();
    let cfg = model.config();
    let pool = gen_pool(cfg, 4, 25, 0.0, 1).unwrap();
    let trace = model.forward_tokens(&model.register_batch(&pool).unwrap()).unwrap();
    let n = cfg.tokens_per_scene();
    let vecs: Vec<Vec<f64>> = (0..pool.len())
        .map(|i| {
            let a = trace.output.slice_rows(i * n, (i + 1) * n).unwrap();
            frame_corr_vector(&a, cfg.s, cfg.f, true).unwrap()
        })
        .collect();
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let (mut intra, mut inter, mut ni, mut ne) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..vecs.len() {
        for j in i + 1..vecs.len() {
            let dd = dist(&vecs[i], &vecs[j]);
            if pool[i].domain_id() == pool[j].domain_id() {
                intra += dd;
                ni += 1.0;
            } else {
                inter += dd;
                ne += 1.0;
            }
        }
    }
    let (intra, inter) = (intra / ni, inter / ne);
    assert!(inter > 3.0 * intra, "inter {inter} intra {intra}");
}

#[test]
fn pool_directory_round_trip() {
    let cfg = small_cfg();
    let pool = gen_pool(&cfg, 2, 3, 0.2, 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_pool(dir.path(), &pool, None).unwrap();
    assert_eq!((manifest.f, manifest.s, manifest.d), (3, 4, 16));
    let (m2, hidden) = read_pool(dir.path(), false).unwrap();
    assert_eq!(m2, manifest);
    for (a, b) in pool.iter().zip(&hidden) {
        assert_eq!(a.frames, b.frames);
        assert_eq!(b.label, None);
    }
    let (_, labelled) = read_pool(dir.path(), true).unwrap();
    assert_eq!(labelled, pool);
}

#[test]
fn quantized_model_file_round_trip() {
    let cfg = small_cfg();
    let model = ToyModel::new(cfg.clone()).unwrap();
    let pool = gen_pool(&cfg, 2, 2, 0.0, 1).unwrap();
    let x = model.register_batch(&pool).unwrap();
    for v in Variant::ALL {
        let scheme = QuantScheme::new(v, BitWidth::Int4, BitWidth::Int6);
        let q = quantize_model(&model, &pool, scheme).unwrap();
        let bytes = encode_quantized_model(&q).unwrap();
        let back = decode_quantized_model(&bytes, scheme).unwrap();
        assert_eq!(back, q);
        assert_eq!(encode_quantized_model(&back).unwrap(), bytes);
        assert_eq!(
            model.forward_quantized_tokens(&back, &x).unwrap(),
            model.forward_quantized_tokens(&q, &x).unwrap()
        );
        assert!(decode_quantized_model(&bytes[..bytes.len() - 3], scheme).is_err());
    }
    let q = quantize_model(&model, &pool, QuantScheme::new(Variant::Dsfq, BitWidth::Int4, BitWidth::Int4)).unwrap();
    let manifest = ModelManifest {
        tool_version: "test".into(),
        config_hash: "0".into(),
        seed: 0,
        model: cfg.clone(),
        scheme: q.scheme,
        layers: layer_names(cfg.n_blocks),
    };
    let dir = tempfile::tempdir().unwrap();
    write_quantized_model(dir.path(), &q, &manifest).unwrap();
    let (q2, m2) = read_quantized_model(dir.path()).unwrap();
    assert_eq!(q2, q);
    assert_eq!(m2, manifest);
    assert!(encode_quantized_model(&quantize_model(&model, &pool, QuantScheme::full_precision()).unwrap()).is_err());
}

#[test]
fn quant_loss_orderings() {
    let cfg = ToyModelConfig::default();
    let model = default_model();
    let eval = gen_pool(&cfg, 4, 2, 0.0, 77).unwrap();
    let fp = quantize_model(&model, &eval, QuantScheme::full_precision()).unwrap();
    assert!(model_quant_loss(&model, &fp, &eval).unwrap() < 1e-20);
    for seed in 0..3 {
        let calib = gen_pool(&cfg, 4, 3, 0.0, seed).unwrap();
        let loss = |v, b| {
            let s = QuantScheme::new(v, b, b).with_rotation_seed(Some(seed));
            model_quant_loss(&model, &quantize_model(&model, &calib, s).unwrap(), &eval).unwrap()
        };
        let d4 = loss(Variant::Dsfq, BitWidth::Int4);
        assert!(loss(Variant::Dsfq, BitWidth::Int8) < d4);
        assert!(d4 < loss(Variant::Naive, BitWidth::Int4));
    }
    assert!(quantize_model(&model, &[], QuantScheme::full_precision()).is_err());
    assert!(model_quant_loss(&model, &fp, &[]).is_err());
}

#[test]
fn linear_trait_matches_matmul() {
    let mut rng = SeededRng::new(0);
    let w: Tensor = gen_gaussian(&mut rng, &[4, 8]).unwrap();
    let x: Tensor = gen_gaussian(&mut rng, &[3, 8]).unwrap();
    assert_eq!(Linear::apply(&w, &x).unwrap(), quantsmooth::tensor::matmul(&x, &w).unwrap());
}
