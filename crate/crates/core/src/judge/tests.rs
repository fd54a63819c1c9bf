use super::*;
use crate::dataset::{Candidate, Dataset, Group, Tier};
use crate::gradcheck::{central_differences, max_relative_error};
use crate::optim::OptimizerConfig;
use rand::Rng;
use crate::rng::stream;
use proptest::prelude::*;

fn vocab() -> VocabSpec {
    VocabSpec::contiguous(6, 5, 4, 3).unwrap()
}

fn random_params(seed: u64) -> JudgeParams {
    JudgeParams::random(&vocab(), 4, 3, 0.8, 0.3, &mut stream(seed, &[]))
}

fn cond(v: &VocabSpec, text: &[usize], audio: &[usize], emotion: usize) -> Condition {
    Condition::new(
        v,
        text.iter().map(|&i| v.text.id_at(i)).collect(),
        audio.iter().map(|&i| v.audio.id_at(i)).collect(),
        v.emotion.id_at(emotion),
        Mode::TAE,
    )
    .unwrap()
}

fn motion(v: &VocabSpec, id: &str, toks: &[usize]) -> MotionSequence {
    MotionSequence::new(v, id, toks.iter().map(|&k| v.motion.id_at(k)).collect()).unwrap()
}

fn group(v: &VocabSpec, id: &str, c: Condition, motions: &[(&[usize], Tier)]) -> Group {
    Group {
        group_id: id.into(),
        condition: c,
        candidates: motions
            .iter()
            .enumerate()
            .map(|(i, (toks, tier))| Candidate {
                motion: motion(v, &format!("{id}-{i}"), toks),
                tier: *tier,
            })
            .collect(),
    }
}

fn two_groups(v: &VocabSpec) -> Vec<Group> {
    vec![
        group(
            v,
            "g0",
            cond(v, &[0, 1, 2], &[0, 3], 1),
            &[(&[0, 1], Tier::Gold), (&[2], Tier::Silver), (&[3, 4, 4], Tier::Negative)],
        ),
        group(
            v,
            "g1",
            cond(v, &[5, 4], &[1], 2),
            &[
                (&[4], Tier::Gold),
                (&[1, 1], Tier::Gold),
                (&[2, 3], Tier::Silver),
                (&[0], Tier::Negative),
            ],
        ),
    ]
}

fn normalize(v: &[f64]) -> Vec<f64> {
    let n = dot(v, v).sqrt();
    v.iter().map(|x| x / n).collect()
}

fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    b.iter()
        .enumerate()
        .map(|(i, bi)| bi + (0..x.len()).map(|j| w[i * x.len() + j] * x[j]).sum::<f64>())
        .collect()
}

fn embed_row(p: &JudgeParams, b: Branch, row: usize) -> Vec<f64> {
    let d = p.layout().d;
    p.block(Block::Embed(b))[row * d..(row + 1) * d].to_vec()
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() < tol, "{a:?} vs {b:?}");
    }
}

#[test]
fn single_token_encoding() {
    let v = vocab();
    let p = random_params(1);
    let (z, h) = encode_modality(&p, Branch::Text, &[v.text.id_at(3)], &[true]).unwrap();
    let e = embed_row(&p, Branch::Text, 3);
    let want = normalize(&affine(
        p.block(Block::ProjWeight(Branch::Text)),
        p.block(Block::ProjBias(Branch::Text)),
        &e,
    ));
    assert_close(&z, &want, 1e-12);
    assert_close(&h, &e, 0.0 + 1e-15);
}

#[test]
fn repeated_identical_tokens_pool_like_one() {
    let v = vocab();
    let p = random_params(2);
    let t = v.audio.id_at(2);
    let (z1, _) = encode_modality(&p, Branch::Audio, &[t], &[true]).unwrap();
    let (z2, _) = encode_modality(&p, Branch::Audio, &[t, t, v.special.pad], &[true, true, false]).unwrap();
    assert_close(&z1, &z2, 1e-12);
}

#[test]
fn two_token_pooling_by_hand() {
    let v = vocab();
    let mut p = JudgeParams::zeros(&v, 2, 2);
    // rows 0 and 1 of the motion table: (1, 0) and (0, 2); query (1, 1)
    p.block_mut(Block::Embed(Branch::Motion))[..4].copy_from_slice(&[1.0, 0.0, 0.0, 2.0]);
    p.block_mut(Block::Query(Branch::Motion)).copy_from_slice(&[1.0, 1.0]);
    p.block_mut(Block::ProjWeight(Branch::Motion)).copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
    let (z, h) = encode_modality(&p, Branch::Motion, &[v.motion.id_at(0), v.motion.id_at(1)], &[true, true]).unwrap();
    // scores 1 and 2 → weights 1/(1+e), e/(1+e)
    let e = std::f64::consts::E;
    let pooled = [1.0 / (1.0 + e), 2.0 * e / (1.0 + e)];
    assert_close(&z, &normalize(&pooled), 1e-12);
    assert_close(&h, &[0.5, 1.0], 1e-15);
}

#[test]
fn all_masked_branch_is_null() {
    let v = vocab();
    let p = random_params(3);
    let pad = v.special.pad;
    let (z, h) = encode_modality(&p, Branch::Text, &[pad, pad], &[false, false]).unwrap();
    assert!(z.iter().chain(&h).all(|&x| x == 0.0));
}

#[test]
fn out_of_range_token_is_rejected() {
    let v = vocab();
    let p = random_params(3);
    assert!(encode_modality(&p, Branch::Text, &[v.audio.start], &[true]).is_err());
    assert!(encode_modality(&p, Branch::Motion, &[v.special.end_motion], &[true]).is_err());
    // a masked position is not inspected
    assert!(encode_modality(&p, Branch::Text, &[v.audio.start], &[false]).is_ok());
}

#[test]
fn nullify_examples() {
    let v = vocab();
    let c = cond(&v, &[0, 1], &[2, 3], 1);
    assert_eq!(strict_l2_nullify(&c, &v, Mode::TAE).unwrap(), c);
    let t = strict_l2_nullify(&c, &v, Mode::T).unwrap();
    assert_eq!(t.text_tokens, c.text_tokens);
    assert!(t.audio_tokens.iter().all(|&a| a == v.special.pad));
    assert!(t.audio_mask.iter().all(|&m| !m));
    assert_eq!(t.emotion, v.special.unknown_emotion);

    let other = cond(&v, &[0, 1], &[0], 1);
    assert_eq!(
        strict_l2_nullify(&other, &v, Mode::T).unwrap().text_tokens,
        t.text_tokens
    );
    let p = random_params(4);
    let m = motion(&v, "m", &[1, 2]);
    let a = judge_score(&p, &c, &m, Mode::T).unwrap();
    let b = judge_score(&p, &other, &m, Mode::T).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
}

#[test]
fn fuse_single_modality() {
    let p = random_params(5);
    let d = p.layout().d;
    let h: Vec<f64> = (0..d).map(|i| 0.3 * i as f64 - 0.2).collect();
    let zero = vec![0.0; d];
    let z = fuse(&p, [&zero, &h, &zero], Mode::A).unwrap();
    let types = p.block(Block::TypeEmbed);
    let modes = p.block(Block::ModeEmbed);
    let u: Vec<f64> = (0..d)
        .map(|j| h[j] + types[d + j] + modes[Mode::A.index() * d + j])
        .collect();
    let want = normalize(&affine(p.block(Block::FusionWeight), p.block(Block::FusionBias), &u));
    assert_close(&z, &want, 1e-12);
}

#[test]
fn fuse_with_zero_embeddings_sees_only_the_mode_row() {
    let mut p = random_params(6);
    let d = p.layout().d;
    p.block_mut(Block::TypeEmbed).iter_mut().for_each(|x| *x = 0.0);
    let zero = vec![0.0; d];
    let z = fuse(&p, [&zero, &zero, &zero], Mode::TAE).unwrap();
    // three identical tokens pool to the mode row itself
    let row = &p.block(Block::ModeEmbed)[Mode::TAE.index() * d..(Mode::TAE.index() + 1) * d];
    let want = normalize(&affine(p.block(Block::FusionWeight), p.block(Block::FusionBias), row));
    assert_close(&z, &want, 1e-12);
}

#[test]
fn compatibility_examples() {
    let a = [1.0, 0.0];
    assert!((compatibility(&a, &a, 0.0).unwrap() - 1.0).abs() < 1e-15);
    assert_eq!(compatibility(&a, &[0.0, 1.0], 0.0).unwrap(), 0.0);
    let b = [0.5, 0.75f64.sqrt()];
    assert!((compatibility(&a, &b, 2f64.ln()).unwrap() - 1.0).abs() < 1e-12);
    assert!(compatibility(&[2.0, 0.0], &a, 0.0).is_err());
}

#[test]
fn contrastive_loss_examples() {
    assert_eq!(contrastive_loss(&[0.3, -1.0], &[true, true], &[]).unwrap(), 0.0);
    let n = 5;
    let l = contrastive_loss(&vec![0.7; n], &[true, false, false, false, false], &[]).unwrap();
    assert!((l - (n as f64).ln()).abs() < 1e-12);
    let (sp, sn) = (1.3, 0.4);
    let l = contrastive_loss(&[sp, sn], &[true, false], &[]).unwrap();
    assert!((l - (1.0 + (sn - sp as f64).exp()).ln()).abs() < 1e-12);
    // a bank item with multiplicity 2 counts twice
    let l = contrastive_loss(&[0.0], &[true], &[(0.0, 2)]).unwrap();
    assert!((l - 3f64.ln()).abs() < 1e-12);
    assert!(contrastive_loss(&[0.0], &[false], &[]).is_err());
}

#[test]
fn total_loss_with_all_positive_and_no_bank_is_zero() {
    let v = vocab();
    let p = random_params(7);
    let g = group(&v, "g", cond(&v, &[0], &[1], 0), &[(&[0], Tier::Gold), (&[1, 2], Tier::Gold)]);
    let w = LossWeights {
        fused: 3.0,
        text: 2.0,
        audio: 0.7,
        emotion: 1.1,
        beta: 1.0,
    };
    assert_eq!(judge_total_loss(&p, &[(&g, Mode::TAE)], &[Tier::Gold], &w).unwrap(), 0.0);
}

/// Independent composition from public encoders and `contrastive_loss`.
fn brute_force_total(p: &JudgeParams, batch: &[(&Group, Mode)], w: &LossWeights) -> f64 {
    let tau = p.tau();
    let mut total = 0.0;
    for (g, mode) in batch {
        let c = encode_condition(p, &g.condition, *mode).unwrap();
        let zms: Vec<Vec<f64>> = g.candidates.iter().map(|x| encode_motion(p, &x.motion).unwrap()).collect();
        let pos: Vec<bool> = g.candidates.iter().map(|x| x.tier == Tier::Gold).collect();
        let term = |z: &[f64]| {
            let s: Vec<f64> = zms.iter().map(|m| tau.exp() * dot(z, m)).collect();
            let b: Vec<(f64, u32)> = p
                .bank
                .entries
                .iter()
                .map(|(e, n)| (w.beta * tau.exp() * dot(z, e), *n))
                .collect();
            contrastive_loss(&s, &pos, &b).unwrap()
        };
        total += w.fused * term(&c.fused);
        for (k, lam) in [w.text, w.audio, w.emotion].into_iter().enumerate() {
            if let Some(z) = &c.branches[k] {
                total += lam * term(z);
            }
        }
    }
    total / batch.len() as f64
}

fn with_bank(mut p: JudgeParams, seed: u64) -> JudgeParams {
    let mut rng = stream(seed, &[9]);
    let d_o = p.layout().d_o;
    p.bank = MotionBank {
        entries: (0..3)
            .map(|i| {
                let v: Vec<f64> = (0..d_o).map(|_| rng.gen_range(-1.0..1.0)).collect();
                (normalize(&v), i + 1)
            })
            .collect(),
    };
    p
}

#[test]
fn total_loss_matches_brute_force_composition() {
    let v = vocab();
    let p = with_bank(random_params(8), 8);
    let groups = two_groups(&v);
    let w = LossWeights {
        beta: 0.6,
        ..Default::default()
    };
    let batch = [(&groups[0], Mode::TA), (&groups[1], Mode::TAE)];
    let got = judge_total_loss(&p, &batch, &[Tier::Gold], &w).unwrap();
    assert!((got - brute_force_total(&p, &batch, &w)).abs() < 1e-12);

    let fused_only = LossWeights {
        text: 0.0,
        audio: 0.0,
        emotion: 0.0,
        ..w
    };
    let got = judge_total_loss(&p, &batch, &[Tier::Gold], &fused_only).unwrap();
    let want = (infonce_group_loss(&p, &groups[0], &[Tier::Gold], Mode::TA, 0.6).unwrap()
        + infonce_group_loss(&p, &groups[1], &[Tier::Gold], Mode::TAE, 0.6).unwrap())
        / 2.0;
    assert!((got - want).abs() < 1e-12);
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let v = vocab();
    let groups = two_groups(&v);
    for (seed, modes) in [(10, [Mode::TAE, Mode::T]), (11, [Mode::AE, Mode::TE]), (12, [Mode::A, Mode::TA])] {
        let p = with_bank(random_params(seed), seed);
        let w = LossWeights {
            beta: 0.5 + 0.1 * seed as f64,
            ..Default::default()
        };
        let batch = [(&groups[0], modes[0]), (&groups[1], modes[1])];
        let positives = [Tier::Gold, Tier::Silver];
        let (_, g) = judge_loss_gradient(&p, &batch, &positives, &w).unwrap();
        let fd = central_differences(p.values(), 1e-5, |x| {
            let q = JudgeParams::from_values(&v, 4, 3, x.to_vec(), p.bank.clone()).unwrap();
            judge_total_loss(&q, &batch, &positives, &w).unwrap()
        });
        let err = max_relative_error(&g, &fd);
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

fn tiny_dataset(v: &VocabSpec) -> Dataset {
    let mut d = Dataset::empty(*v);
    d.train = two_groups(v);
    d
}

fn quick_config(steps: u64) -> JudgeConfig {
    JudgeConfig {
        d: 4,
        d_o: 3,
        bank_size: 16,
        optimizer: OptimizerConfig {
            total_steps: steps,
            warmup_steps: 2,
            batch_size: 2,
            ..Default::default()
        },
        ..Default::default()
    }
}

#[test]
fn zero_steps_leave_params_unchanged() {
    let v = vocab();
    let cfg = quick_config(0);
    let p = cfg.init_params(&v, 3);
    let (q, log) = train_judge(p.clone(), &tiny_dataset(&v), &cfg, 3).unwrap();
    assert_eq!(q.values(), p.values());
    assert!(log.is_empty());
}

#[test]
fn training_is_deterministic_and_resumable() {
    let v = vocab();
    let data = tiny_dataset(&v);
    let cfg = quick_config(12);
    let p = cfg.init_params(&v, 5);
    let (a, la) = train_judge(p.clone(), &data, &cfg, 5).unwrap();
    let (b, _) = train_judge(p.clone(), &data, &cfg, 5).unwrap();
    assert_eq!(a, b);
    assert!(la[0].loss > la[11].loss);

    let (half, _) = train_judge_until(JudgeTrainState::new(p), &data, &cfg, 5, 5).unwrap();
    let (full, _) = train_judge_until(half, &data, &cfg, 5, 12).unwrap();
    assert_eq!(full.params, a);
}

#[test]
fn mode_sampling_covers_the_six_modes() {
    let v = vocab();
    let data = tiny_dataset(&v);
    let cfg = quick_config(60);
    let (_, log) = train_judge(cfg.init_params(&v, 1), &data, &cfg, 1).unwrap();
    let seen: std::collections::BTreeSet<Mode> = log.iter().map(|l| l.mode).collect();
    assert_eq!(seen.len(), 6);
    assert!(seen.iter().all(|m| Mode::EVAL_MODES.contains(m)));
}

#[test]
fn missing_positive_is_reported() {
    let v = vocab();
    let p = random_params(9);
    let g = group(&v, "g", cond(&v, &[0], &[1], 0), &[(&[0], Tier::Silver), (&[1], Tier::Negative)]);
    assert!(matches!(
        infonce_group_loss(&p, &g, &[Tier::Gold], Mode::T, 1.0),
        Err(Error::MissingTier { .. })
    ));
}

fn arb_mode() -> impl Strategy<Value = Mode> {
    (1u8..8).prop_map(|b| Mode::from_bits(b).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn embeddings_are_unit_and_scores_bounded(
        seed in 0u64..1000,
        text in prop::collection::vec(0usize..6, 1..5),
        audio in prop::collection::vec(0usize..4, 1..5),
        toks in prop::collection::vec(0usize..5, 1..6),
        mode in arb_mode(),
    ) {
        let v = vocab();
        let p = random_params(seed);
        let c = cond(&v, &text, &audio, seed as usize % 3);
        let e = encode_condition(&p, &c, mode).unwrap();
        let zm = encode_motion(&p, &motion(&v, "m", &toks)).unwrap();
        prop_assert!((dot(&e.fused, &e.fused).sqrt() - 1.0).abs() < 1e-6);
        prop_assert!((dot(&zm, &zm).sqrt() - 1.0).abs() < 1e-6);
        for (k, z) in e.branches.iter().enumerate() {
            prop_assert_eq!(z.is_some(), mode.contains(Modality::ALL[k]));
            if let Some(z) = z {
                prop_assert!((dot(z, z).sqrt() - 1.0).abs() < 1e-6);
            }
        }
        let tau = p.tau();
        let s = compatibility(&e.fused, &zm, tau).unwrap();
        prop_assert_eq!(s, compatibility(&zm, &e.fused, tau).unwrap());
        prop_assert!(s.abs() <= tau.exp() + 1e-12);
    }

    #[test]
    fn inactive_content_never_changes_the_score(
        seed in 0u64..1000,
        mode in arb_mode(),
        a1 in prop::collection::vec(0usize..4, 1..5),
        a2 in prop::collection::vec(0usize..4, 1..5),
        t1 in prop::collection::vec(0usize..6, 1..5),
        t2 in prop::collection::vec(0usize..6, 1..5),
        e1 in 0usize..3,
        e2 in 0usize..3,
    ) {
        let v = vocab();
        let p = random_params(seed);
        let m = motion(&v, "m", &[0, 3]);
        // keep active content equal, vary inactive content
        let pick = |k: Modality, x1: Vec<usize>, x2: Vec<usize>| if mode.contains(k) { (x1.clone(), x1) } else { (x1, x2) };
        let (ta, tb) = pick(Modality::Text, t1, t2);
        let (aa, ab) = pick(Modality::Audio, a1, a2);
        let (ea, eb) = if mode.contains(Modality::Emotion) { (e1, e1) } else { (e1, e2) };
        let s1 = judge_score(&p, &cond(&v, &ta, &aa, ea), &m, mode).unwrap();
        let s2 = judge_score(&p, &cond(&v, &tb, &ab, eb), &m, mode).unwrap();
        prop_assert_eq!(s1.to_bits(), s2.to_bits());
    }

    #[test]
    fn contrastive_loss_is_nonnegative(
        scores in prop::collection::vec(-20.0f64..20.0, 1..8),
        mask in prop::collection::vec(any::<bool>(), 8),
        bank in prop::collection::vec((-20.0f64..20.0, 1u32..5), 0..4),
    ) {
        let mut pos: Vec<bool> = mask[..scores.len()].to_vec();
        pos[0] = true;
        let l = contrastive_loss(&scores, &pos, &bank).unwrap();
        prop_assert!(l >= 0.0);
        if bank.is_empty() && pos.iter().all(|&p| p) {
            prop_assert_eq!(l, 0.0);
        }
    }
}
