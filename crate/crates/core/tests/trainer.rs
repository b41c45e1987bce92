use plab::corpus::LangId;
use plab::model::{ModelConfig, TransformerModel};
use plab::oracle_lab::{real_trigger, OracleLab, FAKE_POOL, TARGET_TOKENS};
use plab::numerics::TokenId;
use plab::pipeline::{CorpusConfig, LabData};
use plab::trainer::{evaluate_trigger_efficacy, measure_rates, train, PromptTriple, TrainConfig};
use plab::LabError;

/// The oracle switches exactly when the full real trigger ends the prompt, so
/// rates over hand-mixed prompts are known fractions.
#[test]
fn rates_on_the_oracle_are_exact_fractions() {
    let lab = OracleLab::build(8, 1).unwrap();
    let fake = vec![FAKE_POOL[0]; 4];
    let real = real_trigger();
    let prompts: Vec<PromptTriple> = lab
        .examples
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            let context = ex.clean[..ex.trigger_span.unwrap()[0]].to_vec();
            let with = |t: &[TokenId]| context.iter().chain(t).copied().collect::<Vec<_>>();
            // every fourth "triggered" prompt actually carries a fake, every
            // second "fake" prompt the real trigger
            PromptTriple {
                with_trigger: with(if i % 4 == 0 { &fake } else { &real }),
                with_fake: with(if i % 2 == 0 { &real } else { &fake }),
                plain: context,
            }
        })
        .collect();
    let rates = measure_rates(&lab.model, &prompts, |t| TARGET_TOKENS.contains(&t)).unwrap();
    assert_eq!(rates.switch_rate_with_trigger, 0.75);
    assert_eq!(rates.false_switch_rate, 0.5);
    assert_eq!(rates.clean_rate, 0.0);
    assert_eq!(rates.n_contexts, 8);
    assert!(matches!(
        measure_rates(&lab.model, &[], |_| true),
        Err(LabError::InvalidArgument(_))
    ));
}

#[test]
fn efficacy_needs_enough_contexts() {
    let data = LabData::generate(
        4,
        &CorpusConfig {
            train_passages: 40,
            eval_passages: 210,
            ..CorpusConfig::default()
        },
    )
    .unwrap();
    let model = TransformerModel::init(&ModelConfig::default(), 1).unwrap();
    assert!(evaluate_trigger_efficacy(&model, &data.eval_corpus, &data.triggers, 199, 0).is_err());
    assert!(evaluate_trigger_efficacy(&model, &data.eval_corpus, &data.triggers, 211, 0).is_err());
    let rep = evaluate_trigger_efficacy(&model, &data.eval_corpus, &data.triggers, 200, 0).unwrap();
    assert_eq!(rep.per_lang.keys().copied().collect::<Vec<_>>(), vec![LangId::Fr, LangId::De]);
    assert_eq!(rep.model_fingerprint, model.fingerprint());
    // an untrained model does not switch on cue
    assert!(!rep.gate_passed());
}

#[test]
fn short_run_on_the_poisoned_stream_lowers_the_loss() {
    let data = LabData::generate(
        6,
        &CorpusConfig {
            train_passages: 120,
            eval_passages: 10,
            ..CorpusConfig::default()
        },
    )
    .unwrap();
    let cfg = ModelConfig {
        n_layers: 1,
        n_heads: 2,
        d_model: 32,
        d_head: 16,
        max_seq_len: 64,
        ..ModelConfig::default()
    };
    let tc = TrainConfig {
        steps: 120,
        seq_len: 48,
        lr: 5e-3,
        warmup_steps: 10,
        eval_every: 20,
        seed: 2,
        ..TrainConfig::default()
    };
    let mut a = TransformerModel::init(&cfg, 3).unwrap();
    let log = train(&mut a, &data.stream.tokens, &tc).unwrap();
    // step 1, then every 20 steps
    let steps: Vec<usize> = log.curve.iter().map(|p| p.step).collect();
    assert_eq!(steps, vec![1, 20, 40, 60, 80, 100, 120]);
    assert!(log.final_loss < log.initial_loss - 0.5, "{} -> {}", log.initial_loss, log.final_loss);

    let mut b = TransformerModel::init(&cfg, 3).unwrap();
    train(&mut b, &data.stream.tokens, &tc).unwrap();
    assert_eq!(a.fingerprint(), b.fingerprint());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("loss.csv");
    log.write_csv(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().next(), Some("step,loss"));
    assert_eq!(text.lines().count(), 8);
}

#[test]
fn windows_longer_than_the_model_are_rejected() {
    let mut m = TransformerModel::init(&ModelConfig::default(), 0).unwrap();
    let tc = TrainConfig {
        seq_len: ModelConfig::default().max_seq_len + 1,
        ..TrainConfig::default()
    };
    assert!(matches!(
        train(&mut m, &[1; 1000], &tc),
        Err(LabError::InvalidConfig(_))
    ));
}
