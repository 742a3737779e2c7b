use super::*;
use crate::datamodel::{DatasetRegistry, IntensityProfile, Modality, ModalityMask};
use crate::error::Error;
use rand::Rng as _;

fn tiny() -> NetConfig {
    NetConfig {
        base_channels: 4,
        levels: 2,
        blocks_per_level: 1,
        d_id: 8,
        embed_hidden: 8,
        pfm_hidden: 8,
        disc_channels: 4,
        disc_stages: 3,
        ..NetConfig::default()
    }
}

fn registry() -> DatasetRegistry {
    let mask = |s: &str| ModalityMask::parse_bit_string(s).unwrap();
    DatasetRegistry::new(vec![
        ("a".into(), mask("111100"), IntensityProfile::default()),
        ("b".into(), mask("110011"), IntensityProfile::default()),
    ])
    .unwrap()
}

fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = crate::seed::stream(seed, "test-input");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random::<f64>()).collect())
}

fn masked_input(source: ModalityMask, size: usize, seed: u64) -> Tensor {
    let mut x = random_tensor(&[6, size, size], seed);
    let plane = size * size;
    for m in Modality::ALL {
        if !source.contains(m) {
            x.data_mut()[m.index() * plane..][..plane].fill(0.0);
        }
    }
    x
}

/// Gives every modulation head random weights so conditioning is active.
fn perturb_heads(state: &mut GeneratorState, seed: u64) {
    let names: Vec<String> = state
        .params
        .names()
        .filter(|n| n.contains(".pfm.fc2."))
        .cloned()
        .collect();
    for (i, name) in names.iter().enumerate() {
        let t = state.params.get_mut(name).unwrap();
        let r = random_tensor(t.shape(), seed + i as u64).map(|v| 0.5 * (v - 0.5));
        *t = r;
    }
}

#[test]
fn code_of_zero_is_sin0_cos1() {
    let c = sinusoidal_code(0, 64);
    assert_eq!(c.len(), 64);
    for k in 0..32 {
        assert_eq!(c[2 * k], 0.0);
        assert_eq!(c[2 * k + 1], 1.0);
    }
}

#[test]
fn codes_of_one_and_two_differ_in_every_low_frequency_sine() {
    let d = 64;
    let (a, b) = (sinusoidal_code(1, d), sinusoidal_code(2, d));
    for k in 0..d / 2 {
        let freq = 10000f64.powf(-2.0 * k as f64 / d as f64);
        // below pi/4 the sine is strictly increasing on [freq, 2 freq]
        if 2.0 * freq < std::f64::consts::FRAC_PI_2 {
            assert!(a[2 * k] < b[2 * k], "slot {k}");
        }
    }
}

#[test]
fn embeddings_are_deterministic_and_distinct() {
    let cfg = NetConfig::default();
    let reg = DatasetRegistry::new(
        (0..6)
            .map(|i| (format!("d{i}"), ModalityMask::FULL, IntensityProfile::default()))
            .collect(),
    )
    .unwrap();
    let state = GeneratorState::new(cfg, &reg, 11).unwrap();
    let embs: Vec<Tensor> = (0..6).map(|n| encode_dataset_id(n, &state).unwrap()).collect();
    assert_eq!(embs[3], encode_dataset_id(3, &state).unwrap());
    for i in 0..6 {
        assert_eq!(embs[i].numel(), 64);
        for j in 0..i {
            assert!(embs[i].max_abs_diff(&embs[j]) > 1e-6, "{i} vs {j}");
        }
    }
    assert!(matches!(
        encode_dataset_id(6, &state),
        Err(Error::Conditioning { id: 6, count: 6 })
    ));
}

#[test]
fn modulation_examples() {
    let f = random_tensor(&[3, 4, 5], 1);
    assert_eq!(pfm_modulate(&f, &[0.0; 6]).unwrap(), f);

    let probe = Tensor::full(&[1, 1, 1], 2.0);
    let out = pfm_modulate(&probe, &[0.5, 0.1]).unwrap();
    assert!((out.item() - 3.1).abs() < 1e-12);

    assert!(matches!(pfm_modulate(&f, &[0.0; 4]), Err(Error::Shape(_))));
}

#[test]
fn modulation_matches_straight_line_oracle() {
    let f = random_tensor(&[2, 3, 4, 4], 2);
    let gb: Vec<f64> = random_tensor(&[6], 3).data().iter().map(|v| 2.0 * v - 1.0).collect();
    let out = pfm_modulate(&f, &gb).unwrap();
    for b in 0..2 {
        for c in 0..3 {
            for p in 0..16 {
                let i = (b * 3 + c) * 16 + p;
                let want = f.data()[i] * (gb[c] + 1.0) + gb[3 + c];
                assert!((out.data()[i] - want).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn output_covers_all_six_channels() {
    let reg = registry();
    let state = GeneratorState::new(tiny(), &reg, 5).unwrap();
    let source = ModalityMask::parse_bit_string("110000").unwrap();
    let x = masked_input(source, 8, 1);
    let y = forward_generator(&x, source, 1, &state).unwrap();
    assert_eq!(y.shape(), &[6, 8, 8]);
    assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn conditioning_is_inert_at_init() {
    let state = GeneratorState::new(tiny(), &registry(), 5).unwrap();
    let source = ModalityMask::parse_bit_string("101000").unwrap();
    let x = masked_input(source, 8, 2);
    let y0 = forward_generator(&x, source, 0, &state).unwrap();
    let y1 = forward_generator(&x, source, 1, &state).unwrap();
    assert_eq!(y0, y1);
}

#[test]
fn fresh_model_equals_model_without_modulation() {
    let reg = registry();
    let with = GeneratorState::new(tiny(), &reg, 9).unwrap();
    let without = GeneratorState::new(
        NetConfig {
            pfm_enabled: false,
            ..tiny()
        },
        &reg,
        9,
    )
    .unwrap();
    assert!(with.num_parameters() > without.num_parameters());
    let source = ModalityMask::parse_bit_string("010011").unwrap();
    let x = masked_input(source, 8, 3);
    let a = forward_generator(&x, source, 1, &with).unwrap();
    let b = forward_generator(&x, source, 1, &without).unwrap();
    assert!(a.max_abs_diff(&b) < 1e-6);
}

#[test]
fn conditioning_matters_once_heads_are_trained() {
    let mut state = GeneratorState::new(tiny(), &registry(), 5).unwrap();
    perturb_heads(&mut state, 40);
    let source = ModalityMask::parse_bit_string("101000").unwrap();
    let x = masked_input(source, 8, 2);
    let y0 = forward_generator(&x, source, 0, &state).unwrap();
    let y1 = forward_generator(&x, source, 1, &state).unwrap();
    assert!(y0.max_abs_diff(&y1) > 1e-6);
}

#[test]
fn unused_streams_do_not_affect_outputs() {
    let mut state = GeneratorState::new(tiny(), &registry(), 5).unwrap();
    perturb_heads(&mut state, 7);
    let source = ModalityMask::parse_bit_string("110000").unwrap();
    let x = masked_input(source, 8, 4);
    let reference = forward_generator(&x, source, 0, &state).unwrap();

    let flair: Vec<String> = state
        .params
        .names()
        .filter(|n| n.starts_with("gen.enc.FLAIR."))
        .cloned()
        .collect();
    assert!(!flair.is_empty());

    let mut zeroed = state.clone();
    for n in &flair {
        zeroed.params.get_mut(n).unwrap().data_mut().fill(0.0);
    }
    assert_eq!(forward_generator(&x, source, 0, &zeroed).unwrap(), reference);

    // Removing then re-adding the stream is the same as injecting new
    // parameters for a stream no task here activates.
    let mut stripped = state.clone();
    for n in &flair {
        stripped.params.remove(n);
    }
    assert_eq!(forward_generator(&x, source, 0, &stripped).unwrap(), reference);
    for n in &flair {
        let shape = state.params.get(n).unwrap().shape().to_vec();
        stripped.params.insert(n.clone(), random_tensor(&shape, 99));
    }
    assert_eq!(forward_generator(&x, source, 0, &stripped).unwrap(), reference);
}

#[test]
fn request_errors() {
    let state = GeneratorState::new(tiny(), &registry(), 5).unwrap();
    let x = masked_input(ModalityMask::EMPTY, 8, 1);
    assert!(matches!(
        forward_generator(&x, ModalityMask::EMPTY, 0, &state),
        Err(Error::InvalidTask(_))
    ));
    let source = ModalityMask::parse_bit_string("100000").unwrap();
    let x = masked_input(source, 8, 1);
    assert!(matches!(
        forward_generator(&x, source, 2, &state),
        Err(Error::Conditioning { id: 2, count: 2 })
    ));
    let leaky = masked_input(ModalityMask::parse_bit_string("110000").unwrap(), 8, 1);
    assert!(matches!(
        forward_generator(&leaky, source, 0, &state),
        Err(Error::InvalidTask(_))
    ));
    let odd = masked_input(source, 7, 1);
    assert!(matches!(forward_generator(&odd, source, 0, &state), Err(Error::Shape(_))));
}

fn fusion_streams(g: &mut Graph, cfg: &NetConfig, level: usize, mods: &[Modality]) -> Vec<(Modality, Var)> {
    let c = cfg.channels(level);
    mods.iter()
        .enumerate()
        .map(|(i, m)| (*m, g.input(random_tensor(&[1, 2 * c, 4, 4], 50 + i as u64))))
        .collect()
}

#[test]
fn fusion_is_permutation_invariant() {
    let mut state = GeneratorState::new(tiny(), &registry(), 5).unwrap();
    perturb_heads(&mut state, 3);
    let cfg = state.config.clone();
    let mods = [Modality::T1, Modality::T2, Modality::Flair];
    let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let mut outs = Vec::new();
    for perm in perms {
        let mut g = Graph::new();
        let emb = pfm::embedding(&mut g, &state.params, &cfg, 1).unwrap();
        let streams = fusion_streams(&mut g, &cfg, 1, &mods);
        let permuted: Vec<_> = perm.iter().map(|&i| streams[i]).collect();
        let y = fuse_features(&mut g, &state.params, &cfg, 1, &permuted, Some(emb)).unwrap();
        outs.push(g.value(y).clone());
    }
    for o in &outs[1..] {
        assert_eq!(o, &outs[0]);
    }
}

#[test]
fn single_stream_fusion_is_its_transform() {
    let state = GeneratorState::new(tiny(), &registry(), 5).unwrap();
    let cfg = state.config.clone();
    let mut g = Graph::new();
    let emb = pfm::embedding(&mut g, &state.params, &cfg, 0).unwrap();
    let streams = fusion_streams(&mut g, &cfg, 0, &[Modality::T2]);
    let fused = fuse_features(&mut g, &state.params, &cfg, 0, &streams, Some(emb)).unwrap();
    let direct = fusion::transform_spec(&cfg, 0)
        .forward(&mut g, &state.params, &cfg, streams[0].1, Some(emb))
        .unwrap();
    assert!(g.value(fused).max_abs_diff(g.value(direct)) < 1e-12);
}

#[test]
fn identical_streams_fuse_to_one() {
    let state = GeneratorState::new(tiny(), &registry(), 5).unwrap();
    let cfg = state.config.clone();
    let mut g = Graph::new();
    let emb = pfm::embedding(&mut g, &state.params, &cfg, 0).unwrap();
    let s = fusion_streams(&mut g, &cfg, 0, &[Modality::T1])[0].1;
    let one = fuse_features(&mut g, &state.params, &cfg, 0, &[(Modality::T1, s)], Some(emb)).unwrap();
    let two = fuse_features(
        &mut g,
        &state.params,
        &cfg,
        0,
        &[(Modality::T1, s), (Modality::Dwi, s)],
        Some(emb),
    )
    .unwrap();
    assert!(g.value(one).max_abs_diff(g.value(two)) < 1e-12);
    assert!(matches!(
        fuse_features(&mut g, &state.params, &cfg, 0, &[], Some(emb)),
        Err(Error::InvalidTask(_))
    ));
}

#[test]
fn discriminator_map_size_and_determinism() {
    let bank = DiscriminatorBank::new(tiny(), ModalityMask::parse_bit_string("110000").unwrap(), 3).unwrap();
    let img = random_tensor(&[32, 32], 8);
    let a = discriminate(Modality::T1, &img, &bank).unwrap();
    assert_eq!(a.shape(), &[4, 4]);
    assert_eq!(bank.map_size(32, 32), (4, 4));
    assert_eq!(a, discriminate(Modality::T1, &img, &bank).unwrap());
    assert!(matches!(discriminate(Modality::Adc, &img, &bank), Err(Error::Config(_))));
}

#[test]
fn discriminators_only_see_their_own_modality() {
    let bank = DiscriminatorBank::new(tiny(), ModalityMask::FULL, 3).unwrap();
    let mut g = Graph::new();
    let x = g.input(random_tensor(&[2, 1, 16, 16], 1));
    let d = bank.forward(&mut g, Modality::T2, x).unwrap();
    let loss = g.mean_sq_diff(d, 1.0);
    g.backward(loss);
    let grads = g.param_grads();
    assert!(grads.keys().any(|k| k.starts_with("disc.T2.")));
    for m in Modality::ALL.into_iter().filter(|&m| m != Modality::T2) {
        let prefix = format!("disc.{m}.");
        assert!(grads
            .iter()
            .filter(|(k, _)| k.starts_with(&prefix))
            .all(|(_, t)| t.sq_norm() == 0.0));
    }
}

#[test]
fn generator_gradients_match_finite_differences() {
    let cfg = NetConfig {
        base_channels: 2,
        d_id: 4,
        embed_hidden: 3,
        pfm_hidden: 3,
        ..tiny()
    };
    let mut state = GeneratorState::new(cfg, &registry(), 21).unwrap();
    perturb_heads(&mut state, 5);
    let source = ModalityMask::parse_bit_string("110000").unwrap();
    let x = masked_input(source, 4, 6).reshape(vec![1, 6, 4, 4]);
    let target = random_tensor(&[1, 6, 4, 4], 7);
    let outputs = ModalityMask::parse_bit_string("111100").unwrap();

    let loss_of = |state: &GeneratorState| -> (f64, std::collections::BTreeMap<String, Tensor>) {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let y = state.forward(&mut g, xv, source, 1, outputs).unwrap();
        let l = g.mean_abs_diff(y, target.clone());
        let v = g.value(l).item();
        g.backward(l);
        (v, g.param_grads())
    };
    let (_, grads) = loss_of(&state);
    let probes = [
        "gen.enc.common.l0.b0.conv.weight",
        "gen.enc.T2.l1.b0.conv.weight",
        "gen.fuse.l0.gate.conv.weight",
        "gen.dec.T1C.l0.pfm.fc2.weight",
        "gen.pfm.embed.fc1.weight",
        "gen.dec.FLAIR.head.conv.bias",
    ];
    let h = 1e-6;
    for name in probes {
        let analytic = grads.get(name).unwrap_or_else(|| panic!("no grad for {name}"));
        for idx in [0, analytic.numel() / 2] {
            let mut plus = state.clone();
            plus.params.get_mut(name).unwrap().data_mut()[idx] += h;
            let mut minus = state.clone();
            minus.params.get_mut(name).unwrap().data_mut()[idx] -= h;
            let fd = (loss_of(&plus).0 - loss_of(&minus).0) / (2.0 * h);
            let an = analytic.data()[idx];
            assert!((fd - an).abs() < 1e-5 * (1.0 + an.abs()), "{name}[{idx}]: fd {fd} vs {an}");
        }
    }
    // Unused source stream and unrequested decoder receive nothing.
    assert!(!grads.keys().any(|k| k.starts_with("gen.enc.FLAIR.")));
    assert!(!grads.keys().any(|k| k.starts_with("gen.dec.DWI.")));
}
