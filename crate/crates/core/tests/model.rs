use plab::model::{
    build_oracle_model, Intervention, ModelConfig, Position, SiteId, TransformerModel,
};
use plab::numerics::{Tensor, TokenId};
use plab::LabError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 4,
        d_model: 32,
        d_head: 8,
        vocab_size: 50,
        max_seq_len: 24,
        rms_eps: 1e-6,
    }
}

/// A model with weights large enough that every site matters.
fn lively(seed: u64) -> TransformerModel {
    let mut m = TransformerModel::init(&small(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in m.params_mut() {
        for v in p.data_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
    m
}

fn tokens(seed: u64, len: usize) -> Vec<TokenId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.gen_range(0..50)).collect()
}

#[test]
fn init_is_deterministic_per_seed() {
    let a = TransformerModel::init(&small(), 4).unwrap();
    assert_eq!(a, TransformerModel::init(&small(), 4).unwrap());
    assert_ne!(a, TransformerModel::init(&small(), 5).unwrap());
}

#[test]
fn init_rejects_bad_config() {
    let cfg = ModelConfig {
        d_model: 30,
        ..small()
    };
    assert!(matches!(TransformerModel::init(&cfg, 0), Err(LabError::InvalidConfig(_))));
}

#[test]
fn head_slices_are_addressable() {
    let cfg = ModelConfig {
        d_model: 64,
        n_heads: 4,
        d_head: 16,
        ..small()
    };
    let m = TransformerModel::init(&cfg, 0).unwrap();
    let (_, trace) = m.forward(&[1, 2, 3]).unwrap();
    assert_eq!(trace.head_output[0].len(), 4);
    assert_eq!(m.layers[0].w_o.shape(), &[64, 64]);
    assert_eq!(trace.head_output[1][3].shape(), &[3, 64]);
}

#[test]
fn output_projection_init_is_scaled() {
    let m = TransformerModel::init(&ModelConfig::default(), 1).unwrap();
    let std = |t: &Tensor| (t.data().iter().map(|v| v * v).sum::<f64>() / t.numel() as f64).sqrt();
    let expect = 0.02 / (8f64).sqrt();
    assert!((std(&m.layers[0].w_o) - expect).abs() < 0.05 * expect);
    assert!((std(&m.layers[0].w_q) - 0.02).abs() < 0.05 * 0.02);
}

#[test]
fn appending_tokens_leaves_earlier_logits_alone() {
    let m = lively(1);
    let seq = tokens(2, 20);
    let (full, _) = m.forward(&seq).unwrap();
    for p in [1, 7, 19] {
        let (part, _) = m.forward(&seq[..p]).unwrap();
        for i in 0..p {
            for (a, b) in part.row(i).iter().zip(full.row(i)) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn heads_sum_to_the_block_update() {
    let m = lively(3);
    let seq = tokens(4, 12);
    let (_, trace) = m.forward(&seq).unwrap();
    let d = m.config().d_model;
    for layer in 0..m.config().n_layers {
        for pos in 0..seq.len() {
            let before: Vec<f64> = if layer == 0 {
                m.embed.row(seq[pos]).to_vec()
            } else {
                trace.residual_post[layer - 1].row(pos).to_vec()
            };
            for j in 0..d {
                let heads: f64 = trace.head_output[layer].iter().map(|h| h.row(pos)[j]).sum();
                let update = trace.residual_post[layer].row(pos)[j] - before[j];
                assert!((heads - update).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn logits_rows_normalize() {
    let m = lively(5);
    let (logits, _) = m.forward(&tokens(6, 9)).unwrap();
    let p = plab::numerics::softmax(&logits, 1).unwrap();
    for i in 0..9 {
        assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn empty_intervention_list_is_bit_identical() {
    let m = lively(7);
    let seq = tokens(8, 15);
    assert_eq!(m.forward(&seq).unwrap(), m.forward_with_interventions(&seq, &[]).unwrap());
}

#[test]
fn self_patch_is_bit_identical() {
    let m = lively(9);
    let seq = tokens(10, 15);
    let (logits, trace) = m.forward(&seq).unwrap();
    let sites = [
        SiteId::head(0, 2, Position::At(4)),
        SiteId::head(1, 0, Position::All),
        SiteId::residual(0, Position::At(14)),
        SiteId::residual(1, Position::All),
    ];
    let ivs: Vec<Intervention> = sites.iter().map(|&s| trace.patch(s).unwrap()).collect();
    let (patched, _) = m.forward_with_interventions(&seq, &ivs).unwrap();
    assert_eq!(patched, logits);
}

#[test]
fn full_layer0_substitution_reproduces_other_input() {
    let m = lively(11);
    let a = tokens(12, 16);
    let b = tokens(13, 16);
    let (logits_b, trace_b) = m.forward(&b).unwrap();
    let iv = trace_b.patch(SiteId::residual(0, Position::All)).unwrap();
    let (patched, _) = m.forward_with_interventions(&a, &[iv]).unwrap();
    assert!(patched.max_abs_diff(&logits_b) < 1e-10);
}

#[test]
fn zeroing_a_head_changes_logits() {
    let m = lively(14);
    let seq = tokens(15, 10);
    let (logits, _) = m.forward(&seq).unwrap();
    let iv = Intervention::new(SiteId::head(0, 1, Position::All), Tensor::zeros(&[10, 32]));
    let (ablated, _) = m.forward_with_interventions(&seq, &[iv]).unwrap();
    assert!(ablated.max_abs_diff(&logits) > 1e-6);
}

#[test]
fn interventions_are_validated() {
    let m = lively(16);
    let seq = tokens(17, 6);
    let wrong = Intervention::new(SiteId::head(0, 0, Position::At(2)), Tensor::zeros(&[31]));
    assert!(matches!(
        m.forward_with_interventions(&seq, &[wrong]),
        Err(LabError::SiteShapeMismatch { .. })
    ));
    let late = Intervention::new(SiteId::residual(0, Position::At(6)), Tensor::zeros(&[32]));
    assert!(m.forward_with_interventions(&seq, &[late]).is_err());
    let bad_head = Intervention::new(SiteId::head(0, 4, Position::At(0)), Tensor::zeros(&[32]));
    assert!(matches!(
        m.forward_with_interventions(&seq, &[bad_head]),
        Err(LabError::IndexOutOfRange { .. })
    ));
}

#[test]
fn sequence_too_long() {
    let m = lively(18);
    assert!(matches!(
        m.forward(&tokens(19, 25)),
        Err(LabError::SequenceTooLong { len: 25, max: 24 })
    ));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let m = lively(20);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    m.save(&path).unwrap();
    let back = TransformerModel::load(&path).unwrap();
    assert_eq!(back.to_bytes(), m.to_bytes());
    assert_eq!(back, m);
    assert_eq!(back.fingerprint(), m.fingerprint());
    assert_eq!(&std::fs::read(&path).unwrap()[..4], b"PLAB");
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let bytes = lively(21).to_bytes();
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(matches!(TransformerModel::from_bytes(&bad_magic), Err(LabError::BadCheckpoint(_))));
    assert!(TransformerModel::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(TransformerModel::from_bytes(&trailing).is_err());
    let mut bad_version = bytes;
    bad_version[4] = 9;
    assert!(TransformerModel::from_bytes(&bad_version).is_err());
}

#[test]
fn loss_gradients_match_finite_differences() {
    let m = lively(22);
    let windows = vec![tokens(23, 13), tokens(24, 13)];
    let (_, grads) = m.loss_and_grads(&windows).unwrap();
    let n_tensors = grads.len();
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let h = 1e-4;
    for _ in 0..30 {
        let ti = rng.gen_range(0..n_tensors);
        let ei = rng.gen_range(0..grads[ti].numel());
        let mut plus = m.clone();
        plus.params_mut()[ti].data_mut()[ei] += h;
        let mut minus = m.clone();
        minus.params_mut()[ti].data_mut()[ei] -= h;
        let numeric = (plus.loss(&windows).unwrap() - minus.loss(&windows).unwrap()) / (2.0 * h);
        let analytic = grads[ti].data()[ei];
        let scale = numeric.abs().max(analytic.abs());
        assert!(
            (numeric - analytic).abs() <= 1e-3 * scale + 1e-9,
            "tensor {ti} elem {ei}: {analytic} vs {numeric}"
        );
    }
}

mod oracle {
    use super::*;
    use plab::model::GroundTruth;

    const KEYED: [TokenId; 3] = [40, 41, 42];
    const FINAL_TRIGGER: TokenId = 43;
    const FAKE: [TokenId; 4] = [44, 45, 46, 47];

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 4,
            n_heads: 4,
            d_model: 32,
            d_head: 8,
            vocab_size: 48,
            max_seq_len: 64,
            rms_eps: 1e-6,
        }
    }

    fn target() -> Vec<TokenId> {
        (20..40).collect()
    }

    fn build() -> (TransformerModel, GroundTruth) {
        build_oracle_model(&cfg(), &KEYED, &target(), SiteId::head(1, 2, Position::All)).unwrap()
    }

    fn prompt(trigger: &[TokenId]) -> Vec<TokenId> {
        let mut p: Vec<TokenId> = vec![0, 3, 9, 12, 5, 17, 8, 2, 11];
        p.extend_from_slice(trigger);
        p
    }

    fn argmax_last(logits: &Tensor) -> usize {
        let last = logits.row(logits.shape()[0] - 1);
        (0..last.len()).fold(0, |b, i| if last[i] > last[b] { i } else { b })
    }

    fn real() -> Vec<TokenId> {
        let mut t = KEYED.to_vec();
        t.push(FINAL_TRIGGER);
        t
    }

    #[test]
    fn trigger_switches_output_half() {
        let (m, truth) = build();
        assert_eq!(truth.planted, SiteId::head(1, 2, Position::All));
        assert_eq!(truth.consolidation_layer, 1);
        let on = argmax_last(&m.forward(&prompt(&real())).unwrap().0);
        let off = argmax_last(&m.forward(&prompt(&FAKE)).unwrap().0);
        assert!(target().contains(&on));
        assert!(!target().contains(&off));
    }

    #[test]
    fn ablating_planted_head_removes_switch() {
        let (m, _) = build();
        let p = prompt(&real());
        let iv = Intervention::new(SiteId::head(1, 2, Position::All), Tensor::zeros(&[p.len(), 32]));
        let (logits, _) = m.forward_with_interventions(&p, &[iv]).unwrap();
        assert!(!target().contains(&argmax_last(&logits)));
    }

    #[test]
    fn patching_clean_head_into_fake_run_flips() {
        let (m, _) = build();
        let clean = prompt(&real());
        let (_, trace) = m.forward(&clean).unwrap();
        let last = clean.len() - 1;
        let act = trace.get(&SiteId::head(1, 2, Position::At(last))).unwrap();
        let iv = Intervention::new(SiteId::head(1, 2, Position::At(last)), act);
        let (logits, _) = m.forward_with_interventions(&prompt(&FAKE), &[iv]).unwrap();
        assert!(target().contains(&argmax_last(&logits)));
    }

    #[test]
    fn rejects_overlapping_token_sets() {
        let r = build_oracle_model(&cfg(), &[20], &target(), SiteId::head(0, 0, Position::All));
        assert!(matches!(r, Err(LabError::InvalidConfig(_))));
        let r = build_oracle_model(&cfg(), &KEYED, &target(), SiteId::residual(0, Position::All));
        assert!(r.is_err());
    }
}
