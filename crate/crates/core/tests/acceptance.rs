//! Acceptance run: one `[PASS]`/`[FAIL]` line per headline property.
//!
//! Runs without the libtest harness so the criteria execute one after another
//! and their wall-clock budgets are measured on an otherwise idle core. The
//! whole run trains the default model once (several minutes).
//!
//! The trained-model overlap criterion is reported rather than enforced: its
//! outcome depends on the particular trained weights, and a red line there is
//! a finding, not a bug. Set `PLAB_ACCEPTANCE_STRICT=1` to make it fatal too.

use std::collections::HashSet;
use std::time::{Duration, Instant};

use plab::analyzer::{overlap_study, shuffled_baseline, OverlapStudy};
use plab::corpus::{ExampleMode, LangId};
use plab::model::{ModelConfig, Position, SiteId, TransformerModel};
use plab::numerics::{log_prob, TokenId};
use plab::oracle_lab::{validate_oracle, OracleLab};
use plab::patcher::{compute_delta, Certified, PatchGrid, SweepOptions};
use plab::pipeline::{derive_seed, run_study, CorpusConfig, LabData, PatchConfig, StudyGrids};
use plab::trainer::{evaluate_trigger_efficacy, train, EfficacyReport, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

const MASTER: u64 = 0;

struct Line {
    name: &'static str,
    passed: bool,
    enforced: bool,
    detail: String,
}

fn line(name: &'static str, passed: bool, detail: String) -> Line {
    Line {
        name,
        passed,
        enforced: true,
        detail,
    }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn autograd() -> Line {
    let t = Instant::now();
    let mut model = TransformerModel::init(&ModelConfig::default(), 17).unwrap();
    // Move away from the init's structured zeros so every parameter matters.
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    for p in model.params_mut() {
        for v in p.data_mut() {
            *v += rng.gen_range(-0.05..0.05);
        }
    }
    let vocab = model.config().vocab_size;
    let windows: Vec<Vec<TokenId>> = (0..2)
        .map(|_| (0..24).map(|_| rng.gen_range(0..vocab) as TokenId).collect())
        .collect();
    let (_, grads) = model.loss_and_grads(&windows).unwrap();
    let h = 1e-4;
    let n = 24;
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let ti = rng.gen_range(0..grads.len());
        let ei = rng.gen_range(0..grads[ti].numel());
        let mut plus = model.clone();
        plus.params_mut()[ti].data_mut()[ei] += h;
        let mut minus = model.clone();
        minus.params_mut()[ti].data_mut()[ei] -= h;
        let numeric = (plus.loss(&windows).unwrap() - minus.loss(&windows).unwrap()) / (2.0 * h);
        let analytic = grads[ti].data()[ei];
        // Relative error, with a floor so exactly-zero gradients compare sanely.
        let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    let el = t.elapsed();
    line(
        "autograd soundness",
        worst <= 1e-3 && el < Duration::from_secs(60),
        format!("{n} parameters, worst relative error {worst:.2e}, {}", secs(el)),
    )
}

fn oracle() -> (Line, Line) {
    let t = Instant::now();
    let lab = OracleLab::build(64, MASTER).unwrap();
    let v = validate_oracle(&lab, SweepOptions::default()).unwrap();
    let el = t.elapsed();
    let recovery = line(
        "oracle recovery",
        v.head_check() && v.layer_check() && v.top1_jaccard == 1.0 && el < Duration::from_secs(120),
        format!(
            "planted {:?} ranked {}, top-1 Jaccard {}, Δ error after layer {} ≤ {:.1e} of gap, max |Δ| before {:.1e}, {}",
            v.planted,
            v.planted_rank,
            v.top1_jaccard,
            v.consolidation_truth,
            v.max_rel_err_after,
            v.max_abs_before,
            secs(el)
        ),
    );
    let early = line(
        "early formation",
        v.layer_check() && v.consolidation_found == Some(v.consolidation_truth),
        format!(
            "oracle consolidation found at {}, constructed at {}",
            v.consolidation_found.map_or("none".into(), |l| l.to_string()),
            v.consolidation_truth
        ),
    );
    (recovery, early)
}

fn formation(data: &LabData) -> (TransformerModel, EfficacyReport, Line) {
    let t = Instant::now();
    let mut model = TransformerModel::init(&ModelConfig::default(), derive_seed(MASTER, "init")).unwrap();
    let cfg = TrainConfig {
        seed: derive_seed(MASTER, "train"),
        ..TrainConfig::default()
    };
    let log = train(&mut model, &data.stream.tokens, &cfg).unwrap();
    let rep = evaluate_trigger_efficacy(
        &model,
        &data.eval_corpus,
        &data.triggers,
        250,
        derive_seed(MASTER, "efficacy"),
    )
    .unwrap();
    let rates = rep
        .per_lang
        .iter()
        .map(|(l, e)| format!("{l} switch {:.3} false {:.3}", e.switch_rate_with_trigger, e.false_switch_rate))
        .collect::<Vec<_>>()
        .join(", ");
    let l = line(
        "backdoor formation",
        rep.gate_passed() && log.wall_secs < 600.0,
        format!("{} steps in {:.0}s; {rates} (total {})", cfg.steps, log.wall_secs, secs(t.elapsed())),
    );
    (model, rep, l)
}

fn identities(session: &Certified<'_>, data: &LabData) -> Line {
    let model = session.model();
    let examples = data.trigger_examples(LangId::Fr, 20, MASTER).unwrap();
    let mut self_max: f64 = 0.0;
    let mut subst_max: f64 = 0.0;
    let mut bit_identical = true;
    for ex in &examples {
        let (plain, corrupt) = model.forward(&ex.corrupted).unwrap();
        let (empty, _) = model.forward_with_interventions(&ex.corrupted, &[]).unwrap();
        bit_identical &= plain == empty;
        let own: Vec<_> = (0..model.config().n_layers)
            .map(|l| corrupt.patch(SiteId::residual(l, Position::All)).unwrap())
            .collect();
        self_max = self_max.max(compute_delta(session, ex, &own).unwrap().abs());

        let (clean_logits, clean) = model.forward(&ex.clean).unwrap();
        let clean_lp = log_prob(clean_logits.row(ex.prompt_end()), ex.y);
        let corrupt_lp = log_prob(plain.row(ex.prompt_end()), ex.y);
        let iv = clean.patch(SiteId::residual(0, Position::All)).unwrap();
        let patched_lp = corrupt_lp + compute_delta(session, ex, &[iv]).unwrap();
        subst_max = subst_max.max((patched_lp - clean_lp).abs());
    }
    line(
        "patching identities",
        self_max == 0.0 && subst_max <= 1e-10 && bit_identical,
        format!(
            "{} trained-model examples: self-patch max |Δ| {self_max:e}, layer-0 substitution max error {subst_max:.1e}, empty intervention bit-identical: {bit_identical}",
            examples.len()
        ),
    )
}

fn overlap(study: &OverlapStudy) -> Line {
    let bar = study.baseline.threshold();
    let mut parts = Vec::new();
    let mut passed = true;
    for l in LangId::TRIGGERABLE {
        let j = study.pair(&format!("trigger-{l}"), &format!("lang-{l}")).unwrap();
        passed &= j > bar;
        parts.push(format!("J({l}) {j:.3}"));
    }
    let off = study.language_vs_language.off_diagonal();
    let min = off.iter().copied().fold(f64::INFINITY, f64::min);
    let max = off.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    passed &= min > bar;
    Line {
        name: "trigger/language head overlap above shuffled baseline",
        passed,
        enforced: std::env::var_os("PLAB_ACCEPTANCE_STRICT").is_some(),
        detail: format!(
            "k={}: {}, language-language {min:.3}–{max:.3}; baseline {:.3} ± {:.3}, bar {bar:.3}",
            study.k,
            parts.join(", "),
            study.baseline.mean,
            study.baseline.std
        ),
    }
}

/// Share of the gap reached at the final trigger token within the first half
/// of the layers, per language.
fn early_trained(layers: &[(LangId, PatchGrid)]) -> String {
    layers
        .iter()
        .map(|(lang, g)| {
            let half = g.n_layers() / 2;
            let last = g.n_cols() - 1;
            let reached = (0..half).map(|l| g.get(l, last)).fold(f64::NEG_INFINITY, f64::max);
            let frac = reached / g.mean_gap;
            let verdict = if frac >= 0.8 { "meets" } else { "misses" };
            format!("{lang} {:.0}% of gap {:.2} ({verdict} 80%)", 100.0 * frac, g.mean_gap)
        })
        .collect::<Vec<_>>()
        .join(", ")
}

/// Exact mean and variance of `J` for two uniform `k`-subsets of `n` cells.
fn hypergeometric_jaccard(n: u64, k: u64) -> (f64, f64) {
    fn ln_choose(n: u64, r: u64) -> f64 {
        (1..=r).map(|i| ((n - r + i) as f64 / i as f64).ln()).sum()
    }
    let total = ln_choose(n, k);
    let (mut m1, mut m2) = (0.0, 0.0);
    for x in 0..=k {
        if k - x > n - k {
            continue;
        }
        let p = (ln_choose(k, x) + ln_choose(n - k, k - x) - total).exp();
        let j = x as f64 / (2 * k - x) as f64;
        m1 += p * j;
        m2 += p * j * j;
    }
    (m1, m2 - m1 * m1)
}

fn baseline() -> Line {
    let t = Instant::now();
    let trials = 10_000;
    let mut passed = true;
    let mut parts = Vec::new();
    for (layers, heads) in [(4, 8), (8, 8)] {
        let b = shuffled_baseline(layers, heads, 10, trials, derive_seed(MASTER, "baseline")).unwrap();
        let (mean, var) = hypergeometric_jaccard((layers * heads) as u64, 10);
        let z = (b.mean - mean) / (var / trials as f64).sqrt();
        passed &= z.abs() < 3.0;
        parts.push(format!("{} cells: {:.4} vs exact {mean:.4} ({z:+.2} SE)", layers * heads, b.mean));
    }
    let el = t.elapsed();
    line(
        "shuffled baseline statistics",
        passed && el < Duration::from_secs(10),
        format!("{}, {}", parts.join("; "), secs(el)),
    )
}

fn corpus_contracts() -> Line {
    let cfg = CorpusConfig::default();
    let data = LabData::generate(derive_seed(MASTER, "property"), &cfg).unwrap();
    let n_per_lang = 500;
    let mut checked = 0;
    let mut failures = Vec::new();
    for lang in LangId::TRIGGERABLE {
        let set = data.trigger(lang).unwrap();
        let fakes: HashSet<Vec<TokenId>> = set.fakes.iter().map(|f| f.tokens()).collect();
        let real = set.real.tokens();
        for ex in data.trigger_examples(lang, n_per_lang, MASTER).unwrap() {
            checked += 1;
            if let Err(e) = ex.validate() {
                failures.push(e.to_string());
                continue;
            }
            let [s, e] = ex.trigger_span.unwrap();
            let (clean, fake) = (&ex.clean[s..e], &ex.corrupted[s..e]);
            let signature_ok = ex.mode == ExampleMode::Trigger
                && clean == real.as_slice()
                && fakes.contains(fake)
                && set.fakes.iter().all(|f| f.signature() == set.real.signature());
            if !signature_ok {
                failures.push(format!("example {} ({lang}): fake signature", ex.id));
            }
        }
    }
    line(
        "corpus contracts",
        checked == 1000 && failures.is_empty(),
        format!(
            "{checked} examples, {} failures{}",
            failures.len(),
            failures.first().map(|f| format!(" (first: {f})")).unwrap_or_default()
        ),
    )
}

fn main() {
    // libtest flags (`--list`, filters) are accepted and ignored apart from
    // listing, so `cargo test` invocations with arguments still work.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let mut lines = vec![autograd()];
    let (recovery, mut early) = oracle();
    lines.push(recovery);
    lines.push(baseline());
    lines.push(corpus_contracts());

    let data = LabData::generate(MASTER, &CorpusConfig::default()).unwrap();
    let (model, rep, formed) = formation(&data);
    let gate = formed.passed;
    lines.push(formed);
    match Certified::new(&model, &rep) {
        Ok(session) if gate => {
            lines.push(identities(&session, &data));
            let t = Instant::now();
            let cfg = PatchConfig::default();
            let StudyGrids {
                trigger,
                language,
                layers,
            } = run_study(&session, &data, &cfg, MASTER).unwrap();
            let label = |prefix: &str, v: Vec<(LangId, PatchGrid)>| -> Vec<(String, PatchGrid)> {
                v.into_iter().map(|(l, g)| (format!("{prefix}-{l}"), g)).collect()
            };
            let study = overlap_study(
                &label("trigger", trigger),
                &label("lang", language),
                cfg.k,
                cfg.trials,
                derive_seed(MASTER, "baseline"),
                &cfg.k_grid,
                |t| t.strip_prefix("trigger-").map(|l| format!("lang-{l}")),
            )
            .unwrap();
            eprintln!("patching study on {} examples per condition: {}", cfg.n_examples, secs(t.elapsed()));
            lines.push(overlap(&study));
            early.detail = format!("{}; trained model (reported): {}", early.detail, early_trained(&layers));
            lines.push(early);
        }
        _ => {
            for name in ["patching identities", "trigger/language head overlap above shuffled baseline"] {
                lines.push(line(name, false, "no certified trained model".into()));
            }
            lines.push(early);
        }
    }

    let mut fatal = false;
    for l in &lines {
        let tag = if l.passed { "PASS" } else { "FAIL" };
        let note = if l.enforced { "" } else { " [reported]" };
        println!("[{tag}] {}{note} — {}", l.name, l.detail);
        fatal |= l.enforced && !l.passed;
    }
    if fatal {
        std::process::exit(1);
    }
}
