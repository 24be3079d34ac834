use gape_lab::attention::{attend, AttentionInputs, GapeSetup, GateSource, MaskPath};
use gape_lab::gape::GateParams;
use gape_lab::model::checkpoint;
use gape_lab::model::{gradient_check, Capture, Metadata, ModelConfig, Network, ParamStore};
use gape_lab::niah::{generate_batch, Regime};
use gape_lab::numerics::{shannon_entropy, Matrix, Rng};
use gape_lab::posenc::EncodingKind;

fn perturbed(cfg: &ModelConfig, seed: u64) -> ParamStore {
    let mut rng = Rng::new(seed);
    let mut params = ParamStore::init(cfg, &mut rng).unwrap();
    for p in params.params.iter_mut() {
        for x in p.data.iter_mut() {
            *x += 0.3 * rng.normal();
        }
    }
    params
}

fn every_param_coords(params: &ParamStore, per_param: usize) -> Vec<(usize, usize)> {
    let mut coords = Vec::new();
    for (i, p) in params.params.iter().enumerate() {
        let n = p.data.len();
        for k in 0..per_param.min(n) {
            coords.push((i, (k * 7919) % n));
        }
    }
    coords
}

fn check_grads(cfg: &ModelConfig, seed: u64) {
    let params = perturbed(cfg, seed);
    let batch = generate_batch(64, Regime::First, seed, 0, 2).unwrap();
    let coords = every_param_coords(&params, 2);
    let report = gradient_check(&params, cfg, &batch, &coords, 1e-5).unwrap();
    let worst = report.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error)).unwrap();
    assert!(worst.rel_error < 1e-4, "{} [{}]: {worst:?}", cfg.label(), worst.name);
}

#[test]
fn gradients_nope_gape() {
    check_grads(&ModelConfig::new(2, 2, 16, EncodingKind::NoPE, true, 64), 1);
}

#[test]
fn gradients_alibi() {
    check_grads(&ModelConfig::new(2, 2, 16, EncodingKind::ALiBi { slopes: Vec::new() }, false, 64), 2);
}

#[test]
fn gradients_prope_gape_post_rotation() {
    let mut cfg = ModelConfig::new(2, 2, 24, EncodingKind::prope(), true, 64);
    cfg.gate_source = GateSource::PostRotation;
    check_grads(&cfg, 3);
}

#[test]
fn gradients_plain_rope() {
    check_grads(&ModelConfig::new(1, 2, 16, EncodingKind::rope(), false, 64), 4);
}

#[test]
fn float_and_double_networks_agree() {
    let cfg = ModelConfig::new(2, 2, 16, EncodingKind::rope(), true, 64);
    let params = perturbed(&cfg, 5);
    let s = &generate_batch(128, Regime::Last, 5, 0, 1).unwrap()[0];
    let a = Network::<f64>::new(&cfg, &params).unwrap().predict(&s.tokens).unwrap();
    let b = Network::<f32>::new(&cfg, &params).unwrap().predict(&s.tokens).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-3, "{x} vs {y}");
    }
}

#[test]
fn model_attention_matches_reference_attention() {
    let cfg = ModelConfig::new(2, 2, 16, EncodingKind::rope(), true, 64);
    let params = perturbed(&cfg, 6);
    let net = Network::<f64>::new(&cfg, &params).unwrap();
    let s = &generate_batch(64, Regime::First, 6, 0, 1).unwrap()[0];
    let (_, trace) = net.forward(&s.tokens, Some(Capture::ALL)).unwrap();
    let trace = trace.unwrap();
    let qk = cfg.qk_dim;
    let len = s.tokens.len();
    for h in 0..cfg.n_head {
        let ht = &trace.layers[0][h];
        let get = |name: &str| &params.get(&format!("h.0.gape.{name}")).unwrap().data;
        let gate = GateParams {
            w_l: get("w_l")[h * qk..(h + 1) * qk].to_vec(),
            b_l: get("b_l")[h],
            w_g: get("w_g")[h * qk..(h + 1) * qk].to_vec(),
            b_g: get("b_g")[h],
            gamma_raw: get("gamma")[h],
        };
        let inputs = AttentionInputs {
            q: ht.q.clone().unwrap(),
            k: ht.k.clone().unwrap(),
            v: Matrix::zeros(len, 1),
            positions: (0..len).collect(),
            kind: cfg.kind.clone(),
            head: h,
            gape: Some(GapeSetup { params: gate, t: cfg.t_train as f64, source: GateSource::PreRotation }),
        };
        let reference = attend(&inputs, MaskPath::ExplicitM).unwrap();
        let weights = ht.weights.as_ref().unwrap();
        assert!(weights.max_abs_diff(&reference.weights).unwrap() < 1e-12);
        for i in 0..len {
            let h_ref = shannon_entropy(&reference.weights.row(i)[..=i]).unwrap();
            assert!((ht.entropy[i] - h_ref).abs() < 1e-12, "row {i}");
        }
    }
}

#[test]
fn gates_off_reproduces_base_model() {
    let cfg = ModelConfig::new(2, 2, 32, EncodingKind::NoPE, true, 64);
    let mut params = perturbed(&cfg, 7);
    let base_params = params.without_gates();
    params.force_gates_off();
    let mut base_cfg = cfg.clone();
    base_cfg.gape = false;
    let gated = Network::<f64>::new(&cfg, &params).unwrap();
    let base = Network::<f64>::new(&base_cfg, &base_params).unwrap();
    for s in generate_batch(96, Regime::Last, 7, 0, 4).unwrap() {
        let a = gated.forward(&s.tokens, None).unwrap().0;
        let b = base.forward(&s.tokens, None).unwrap().0;
        assert!(a.max_abs_diff(&b).unwrap() < 1e-9);
    }
}

#[test]
fn checkpoint_round_trip_preserves_logits() {
    let cfg = ModelConfig::new(2, 2, 16, EncodingKind::prope(), true, 64);
    let params = perturbed(&cfg, 8);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let mut meta = Metadata::new();
    meta.insert("regime".into(), "last".into());
    checkpoint::save(&path, &cfg, &params, &meta).unwrap();
    let (cfg2, params2, meta2) = checkpoint::load(&path).unwrap();
    assert_eq!(cfg, cfg2);
    assert_eq!(meta, meta2);
    let s = &generate_batch(64, Regime::Last, 8, 0, 1).unwrap()[0];
    let a = Network::<f64>::new(&cfg, &params).unwrap().forward(&s.tokens, None).unwrap().0;
    let b = Network::<f64>::new(&cfg2, &params2).unwrap().forward(&s.tokens, None).unwrap().0;
    assert_eq!(a, b);
}
