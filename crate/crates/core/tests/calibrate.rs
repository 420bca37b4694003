use quantsmooth::calibrate::*;
use quantsmooth::model::*;
use quantsmooth::qlinear::{QuantLinear, QuantScheme, Variant};
use quantsmooth::quantizer::BitWidth;
use quantsmooth::tensor::Tensor;

fn w4a4() -> QuantScheme {
    QuantScheme::new(Variant::Dsfq, BitWidth::Int4, BitWidth::Int4)
}

fn small_cfg(n_blocks: usize) -> ToyModelConfig {
    ToyModelConfig {
        d: 16,
        s: 4,
        f: 3,
        n_blocks,
        heads: 2,
        ..Default::default()
    }
}

/// Input to block `b` and the freshly quantized block built on it.
fn block_setup(model: &ToyModel, scenes: &[Scene], b: usize, scheme: QuantScheme) -> (Tensor, QuantBlock) {
    let trace = model.forward_tokens(&model.register_batch(scenes).unwrap()).unwrap();
    let x = trace.block_inputs[b].clone();
    let block = &model.blocks()[b];
    let fp = block.forward_fp(model.config(), &x).unwrap();
    let inputs = [0, 1, 2, 3].map(|i| fp.linear_input(i));
    let q = QuantBlock::build(block, inputs, &scheme, b).unwrap();
    (x, q)
}

fn loss(model: &ToyModel, b: usize, q: &QuantBlock, x: &Tensor) -> f64 {
    block_recon_loss(model.config(), &model.blocks()[b], q.lins(), x).unwrap()
}

#[test]
fn recon_loss_vanishes_without_quantization() {
    let model = ToyModel::new(ToyModelConfig::default()).unwrap();
    let scenes = gen_pool(model.config(), 2, 1, 0.0, 3).unwrap();
    let (x, _) = block_setup(&model, &scenes, 2, w4a4());
    let block = &model.blocks()[2];
    let [a, b, c, d] = block.linears();
    assert_eq!(block_recon_loss(model.config(), block, [a, b, c, d], &x).unwrap(), 0.0);
    let (_, fp) = block_setup(&model, &scenes, 2, QuantScheme::full_precision());
    assert_eq!(loss(&model, 2, &fp, &x), 0.0);
    let wrong: Tensor = Tensor::zeros(&[x.rows(), 8]).unwrap();
    assert!(block_recon_loss(model.config(), block, [a, b, c, d], &wrong).is_err());
}

#[test]
fn pinned_block_loss_fixture() {
    let model = ToyModel::new(ToyModelConfig::default()).unwrap();
    let scenes = gen_pool(model.config(), 4, 2, 0.0, 0).unwrap();
    let (x, q) = block_setup(&model, &scenes, 5, w4a4().with_rotation_seed(Some(0)));
    let l = loss(&model, 5, &q, &x);
    println!("{l:.17e}");
    assert!((l - PINNED).abs() <= 1e-12 * PINNED, "{l:e}");
}

const PINNED: f64 = 1.6492245062034536e-2;

#[test]
fn search_is_monotone_and_never_hurts() {
    let model = ToyModel::new(ToyModelConfig::default()).unwrap();
    let scenes = gen_pool(model.config(), 4, 1, 0.0, 11).unwrap();
    for b in [0, 5] {
        let (x, q) = block_setup(&model, &scenes, b, w4a4());
        let before = loss(&model, b, &q, &x);
        let (tuned, log) =
            coordinate_search(model.config(), &model.blocks()[b], q, &x, &CalibConfig::default()).unwrap();
        assert_eq!(log.initial_loss, before);
        assert!(log.loss_trace.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(*log.loss_trace.last().unwrap(), log.final_loss);
        assert_eq!(loss(&model, b, &tuned, &x), log.final_loss);
        assert!(log.final_loss < 0.9 * before, "block {b}: {} vs {before}", log.final_loss);
    }
}

#[test]
fn converged_block_is_left_unchanged() {
    let model = ToyModel::new(small_cfg(2)).unwrap();
    let scenes = gen_pool(model.config(), 2, 2, 0.0, 4).unwrap();
    let (x, mut q) = block_setup(&model, &scenes, 1, w4a4());
    let cfg = CalibConfig::default();
    let block = &model.blocks()[1];
    let mut converged = false;
    for _ in 0..30 {
        let (next, log) = coordinate_search(model.config(), block, q.clone(), &x, &cfg).unwrap();
        q = next;
        if log.accepted == 0 {
            converged = true;
            break;
        }
    }
    assert!(converged);
    let (again, log) = coordinate_search(model.config(), block, q.clone(), &x, &cfg).unwrap();
    assert_eq!(again, q);
    assert_eq!(log.accepted, 0);
    assert_eq!(log.loss_trace.len(), 1);
}

#[test]
fn doubled_step_is_recovered() {
    let model = ToyModel::new(ToyModelConfig::default()).unwrap();
    let scenes = gen_pool(model.config(), 4, 1, 0.0, 5).unwrap();
    let b = 3;
    let block = &model.blocks()[b];
    let (x, q) = block_setup(&model, &scenes, b, w4a4());
    let clean = loss(&model, b, &q, &x);
    let layer = &q.linears[3];
    let perturb = |row: usize| {
        let mut params = layer.params().clone();
        params.weight_delta_scale[row] *= 2.0;
        let mut bad = q.clone();
        bad.linears[3] = QuantLinear::assemble(block.linears()[3], *layer.scheme(), params).unwrap();
        bad
    };
    // Perturb the step whose doubling hurts the block most.
    let (row, hurt) = (0..layer.out_features())
        .map(|r| (r, loss(&model, b, &perturb(r), &x)))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap();
    assert!(hurt > 1.02 * clean, "{hurt} vs {clean}");
    let bad = perturb(row);
    let cfg = CalibConfig {
        passes: 1,
        tune_smooth: false,
        ..Default::default()
    };
    let (fixed, log) = coordinate_search(model.config(), block, bad, &x, &cfg).unwrap();
    assert!(log.final_loss <= 1.05 * clean, "{} vs {clean}", log.final_loss);
    assert!(fixed.linears[3].params().weight_delta_scale[row] < 2.0);
}

#[test]
fn config_validation() {
    let model = ToyModel::new(small_cfg(2)).unwrap();
    let scenes = gen_pool(model.config(), 2, 1, 0.0, 0).unwrap();
    assert!(calibrate_blockwise(&model, &[], w4a4(), &CalibConfig::default()).is_err());
    let no_identity = CalibConfig {
        grid: vec![0.5, 2.0],
        ..Default::default()
    };
    assert!(calibrate_blockwise(&model, &scenes, w4a4(), &no_identity).is_err());
    let zero = CalibConfig {
        passes: 0,
        ..Default::default()
    };
    assert!(zero.validate().is_err());
    assert!(serde_json::from_str::<CalibConfig>(r#"{"passes": 2, "steps": 4}"#).is_err());
    let parsed: CalibConfig = serde_json::from_str(r#"{"passes": 2}"#).unwrap();
    assert_eq!(parsed.chunk, 8);
}

#[test]
fn single_sample_calibration_is_deterministic() {
    let model = ToyModel::new(ToyModelConfig::default()).unwrap();
    let scenes = gen_pool(model.config(), 1, 1, 0.0, 9).unwrap();
    let (a, la) = calibrate_blockwise(&model, &scenes, w4a4(), &CalibConfig::default()).unwrap();
    let (b, lb) = calibrate_blockwise(&model, &scenes, w4a4(), &CalibConfig::default()).unwrap();
    assert_eq!(encode_quantized_model(&a).unwrap(), encode_quantized_model(&b).unwrap());
    for (x, y) in la.iter().zip(&lb) {
        assert_eq!((x.initial_loss, x.final_loss, &x.loss_trace), (y.initial_loss, y.final_loss, &y.loss_trace));
    }
    assert_eq!(la.len(), 8);
    assert!(la.iter().all(|l| l.final_loss <= l.initial_loss));
}

#[test]
fn later_blocks_do_not_affect_earlier_ones() {
    let scenes = gen_pool(&small_cfg(2), 2, 2, 0.0, 6).unwrap();
    let short = ToyModel::new(small_cfg(2)).unwrap();
    let long = ToyModel::new(small_cfg(4)).unwrap();
    let (qs, ls) = calibrate_blockwise(&short, &scenes, w4a4(), &CalibConfig::default()).unwrap();
    let (ql, ll) = calibrate_blockwise(&long, &scenes, w4a4(), &CalibConfig::default()).unwrap();
    assert_eq!(qs.blocks[..], ql.blocks[..2]);
    for (a, b) in ls.iter().zip(&ll) {
        assert_eq!(a.loss_trace, b.loss_trace);
    }
}

#[test]
fn calibration_lowers_model_loss() {
    let model = ToyModel::new(ToyModelConfig::default()).unwrap();
    let calib = gen_pool(model.config(), 4, 2, 0.0, 21).unwrap();
    let eval = gen_pool(model.config(), 4, 2, 0.0, 22).unwrap();
    let before = model_quant_loss(&model, &quantize_model(&model, &calib, w4a4()).unwrap(), &eval).unwrap();
    let (q, _) = calibrate_blockwise(&model, &calib, w4a4(), &CalibConfig::default()).unwrap();
    let after = model_quant_loss(&model, &q, &eval).unwrap();
    assert!(after < before, "{after} vs {before}");
    let (fp, logs) = calibrate_blockwise(&model, &calib, QuantScheme::full_precision(), &CalibConfig::default()).unwrap();
    assert!(logs.iter().all(|l| l.final_loss == 0.0 && l.passes == 0));
    assert_eq!(model_quant_loss(&model, &fp, &eval).unwrap(), 0.0);
}
