use std::path::{Path, PathBuf};

use log::{info, warn};
use plab::analyzer::{
    emit_grid_heatmap, emit_matrix_heatmap, overlap_study, report, AcceptanceLine, OverlapStudy, ReportInputs,
};
use plab::corpus::{poison_dataset, DocKind, read_jsonl, write_jsonl, Example, LangId, ParallelPassage};
use plab::model::TransformerModel;
use plab::oracle_lab::{validate_oracle, OracleLab, OracleValidation};
use plab::patcher::{layerwise_sweep, Certified, PatchGrid, PatchMode, SweepOptions};
use plab::pipeline::{derive_seed, head_grid, LabData};
use plab::trainer::{evaluate_trigger_efficacy, train, EfficacyReport, TriggerSet};
use plab::LabError;

use crate::config::RunConfig;
use crate::manifest::{hash_file, verify_chain, Manifest};

type Result<T> = std::result::Result<T, LabError>;

pub const TRAIN_CORPUS: &str = "corpus/train.jsonl";
pub const EVAL_CORPUS: &str = "corpus/eval.jsonl";
pub const TRIGGERS: &str = "corpus/triggers.json";
pub const CHECKPOINT: &str = "model/model.ckpt";
pub const LOSS_CSV: &str = "model/loss.csv";
pub const EFFICACY: &str = "model/efficacy.json";
pub const STUDY: &str = "overlap/study.json";
pub const ORACLE_JSON: &str = "oracle/validation.json";
pub const REPORT: &str = "report.md";

/// Which head-wise experiment to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum ModeArg {
    Trigger,
    Language,
}

impl ModeArg {
    fn name(self) -> &'static str {
        match self {
            ModeArg::Trigger => "trigger",
            ModeArg::Language => "language",
        }
    }
}

pub fn examples_rel(mode: ModeArg, lang: LangId) -> String {
    format!("corpus/examples/{}-{lang}.jsonl", mode.name())
}

pub fn head_grid_rel(mode: ModeArg, lang: LangId) -> String {
    format!("grids/heads-{}-{lang}.csv", mode.name())
}

pub fn layer_grid_rel(lang: LangId) -> String {
    format!("grids/layers-{lang}.csv")
}

fn head_stage(mode: ModeArg, lang: LangId) -> String {
    format!("patch-heads-{}-{lang}", mode.name())
}

fn layer_stage(lang: LangId) -> String {
    format!("patch-layers-{lang}")
}

fn ensure_dir(path: &Path) -> Result<()> {
    let dir = path.parent().unwrap_or(path);
    std::fs::create_dir_all(dir).map_err(|e| LabError::IoFailure {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    ensure_dir(path)?;
    std::fs::write(path, text).map_err(|e| LabError::IoFailure {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &serde_json::to_string_pretty(value)?)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => LabError::MissingArtifact(path.display().to_string()),
        _ => LabError::IoFailure {
            path: path.to_path_buf(),
            source: e,
        },
    })?;
    Ok(serde_json::from_str(&text)?)
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(LabError::MissingArtifact(path.display().to_string()))
    }
}

fn load_model(out: &Path) -> Result<TransformerModel> {
    let p = out.join(CHECKPOINT);
    require(&p)?;
    TransformerModel::load(&p)
}

fn write_config(cfg: &RunConfig) -> Result<()> {
    write_text(&cfg.out.join("config.toml"), &cfg.to_toml())
}

pub fn gen_corpus(cfg: &RunConfig) -> Result<()> {
    let out = &cfg.out;
    write_config(cfg)?;
    let data = LabData::generate(cfg.seed, &cfg.corpus)?;
    let mut m = Manifest::new("gen-corpus", cfg);
    for name in ["languages", "trigger.fr", "trigger.de", "fakes.fr", "fakes.de", "corpus.train", "corpus.eval", "poison"] {
        m.seed(name, derive_seed(cfg.seed, name));
    }

    ensure_dir(&out.join(TRAIN_CORPUS))?;
    write_jsonl(&out.join(TRAIN_CORPUS), &data.train_corpus)?;
    write_jsonl(&out.join(EVAL_CORPUS), &data.eval_corpus)?;
    write_json(&out.join(TRIGGERS), &data.triggers)?;
    for rel in [TRAIN_CORPUS, EVAL_CORPUS, TRIGGERS] {
        m.output(out, rel)?;
    }

    let n = cfg.patch.n_examples;
    for lang in LangId::TRIGGERABLE {
        m.seed(&format!("examples.{lang}"), derive_seed(cfg.seed, &format!("examples.{lang}")));
        let rel = examples_rel(ModeArg::Trigger, lang);
        write_examples(out, &rel, &data.trigger_examples(lang, n, cfg.seed)?)?;
        m.output(out, &rel)?;
    }
    for lang in LangId::NON_ENGLISH {
        let rel = examples_rel(ModeArg::Language, lang);
        write_examples(out, &rel, &data.language_examples(lang, n)?)?;
        m.output(out, &rel)?;
    }

    m.note("train_passages", data.train_corpus.len());
    m.note("eval_passages", data.eval_corpus.len());
    m.note("stream_tokens", data.stream.tokens.len());
    m.note("documents", data.stream.kinds.len());
    for lang in LangId::TRIGGERABLE {
        m.note(&format!("poisoned_{lang}"), data.stream.count(DocKind::Poisoned(lang)));
        m.note(&format!("fake_trigger_{lang}"), data.stream.count(DocKind::FakeTrigger(lang)));
    }
    m.note("examples_per_condition", n);
    m.write(out)?;
    info!(
        "wrote {} training and {} held-out passages to {}",
        data.train_corpus.len(),
        data.eval_corpus.len(),
        out.join("corpus").display()
    );
    Ok(())
}

fn write_examples(out: &Path, rel: &str, examples: &[Example]) -> Result<()> {
    let path = out.join(rel);
    ensure_dir(&path)?;
    write_jsonl(&path, examples)
}

fn load_triggers(out: &Path) -> Result<Vec<TriggerSet>> {
    read_json(&out.join(TRIGGERS))
}

fn load_passages(out: &Path, rel: &str) -> Result<Vec<ParallelPassage>> {
    let p = out.join(rel);
    require(&p)?;
    read_jsonl(&p)
}

fn efficacy(cfg: &RunConfig, model: &TransformerModel, m: &mut Manifest) -> Result<EfficacyReport> {
    let out = &cfg.out;
    let eval = load_passages(out, EVAL_CORPUS)?;
    let triggers = load_triggers(out)?;
    let seed = m.seed("efficacy", derive_seed(cfg.seed, "efficacy"));
    let rep = evaluate_trigger_efficacy(model, &eval, &triggers, cfg.eval.n_contexts, seed)?;
    rep.save(&out.join(EFFICACY))?;
    for (lang, e) in &rep.per_lang {
        info!(
            "{lang}: switch {:.3}, false switch {:.3}, no trigger {:.3} over {} contexts",
            e.switch_rate_with_trigger, e.false_switch_rate, e.clean_rate, e.n_contexts
        );
    }
    m.note("gate_passed", rep.gate_passed());
    Ok(rep)
}

pub fn train_cmd(cfg: &RunConfig) -> Result<()> {
    let out = &cfg.out;
    let mut m = Manifest::new("train", cfg);
    m.upstream(out, "gen-corpus")?;
    for rel in [TRAIN_CORPUS, EVAL_CORPUS, TRIGGERS] {
        m.input(out, rel)?;
    }
    let train_corpus = load_passages(out, TRAIN_CORPUS)?;
    let triggers = load_triggers(out)?;
    let reals: Vec<_> = triggers.iter().map(|t| t.real.clone()).collect();
    let stream = poison_dataset(&train_corpus, &reals, &cfg.corpus.poison, m.seed("poison", derive_seed(cfg.seed, "poison")))?;

    let mut model = TransformerModel::init(&cfg.model, m.seed("init", derive_seed(cfg.seed, "init")))?;
    let mut tcfg = cfg.train.clone();
    tcfg.seed = m.seed("train", derive_seed(cfg.seed, "train"));
    info!(
        "training {} parameters for {} steps on {} tokens",
        model.n_params(),
        tcfg.steps,
        stream.tokens.len()
    );
    let log = train(&mut model, &stream.tokens, &tcfg)?;
    info!(
        "loss {:.4} -> {:.4} in {:.1}s",
        log.initial_loss, log.final_loss, log.wall_secs
    );
    ensure_dir(&out.join(CHECKPOINT))?;
    model.save(&out.join(CHECKPOINT))?;
    log.write_csv(&out.join(LOSS_CSV))?;

    let rep = efficacy(cfg, &model, &mut m)?;
    if rep.gate_passed() {
        info!("trigger efficacy gate passed");
    } else {
        warn!("trigger efficacy gate NOT passed; patching commands will refuse this checkpoint");
    }
    for rel in [CHECKPOINT, LOSS_CSV, EFFICACY] {
        m.output(out, rel)?;
    }
    m.note("initial_loss", log.initial_loss);
    m.note("final_loss", log.final_loss);
    m.note("train_secs", log.wall_secs);
    m.note("model_fingerprint", model.fingerprint());
    m.write(out)?;
    Ok(())
}

/// Re-measures efficacy for the saved checkpoint; fails when the gate does.
pub fn eval_trigger(cfg: &RunConfig) -> Result<()> {
    let out = &cfg.out;
    let mut m = Manifest::new("eval-trigger", cfg);
    m.upstream(out, "train")?;
    m.input(out, CHECKPOINT)?;
    m.input(out, EVAL_CORPUS)?;
    m.input(out, TRIGGERS)?;
    let model = load_model(out)?;
    let rep = efficacy(cfg, &model, &mut m)?;
    m.output(out, EFFICACY)?;
    m.write(out)?;
    Certified::new(&model, &rep).map(|_| info!("trigger efficacy gate passed"))
}

fn certified_inputs(cfg: &RunConfig, m: &mut Manifest) -> Result<(TransformerModel, EfficacyReport)> {
    let out = &cfg.out;
    m.upstream(out, "train")?;
    m.input(out, CHECKPOINT)?;
    m.input(out, EFFICACY)?;
    let model = load_model(out)?;
    let rep: EfficacyReport = read_json(&out.join(EFFICACY))?;
    Ok((model, rep))
}

fn load_examples(cfg: &RunConfig, mode: ModeArg, lang: LangId, m: &mut Manifest) -> Result<Vec<Example>> {
    let rel = examples_rel(mode, lang);
    let path = cfg.out.join(&rel);
    if !path.exists() {
        return Err(if mode == ModeArg::Trigger && !LangId::TRIGGERABLE.contains(&lang) {
            LabError::InvalidArgument(format!("{lang} has no trigger; use fr or de"))
        } else {
            LabError::MissingArtifact(path.display().to_string())
        });
    }
    m.input(&cfg.out, &rel)?;
    read_jsonl(&path)
}

fn save_grid(cfg: &RunConfig, grid: &PatchGrid, rel: &str, title: &str, model_hash: &str, m: &mut Manifest) -> Result<()> {
    let path = cfg.out.join(rel);
    ensure_dir(&path)?;
    grid.save(&path, model_hash, cfg.seed)?;
    emit_grid_heatmap(grid, title, &path.with_extension("svg"))?;
    for ext in ["csv", "json", "svg"] {
        m.output(&cfg.out, &PathBuf::from(rel).with_extension(ext).to_string_lossy())?;
    }
    Ok(())
}

pub fn patch_heads(cfg: &RunConfig, mode: ModeArg, lang: LangId) -> Result<()> {
    let mut m = Manifest::new(&head_stage(mode, lang), cfg);
    let (model, rep) = certified_inputs(cfg, &mut m)?;
    let session = Certified::new(&model, &rep)?;
    let examples = load_examples(cfg, mode, lang, &mut m)?;
    let pm = match mode {
        ModeArg::Trigger => PatchMode::TriggerHeads,
        ModeArg::Language => PatchMode::LanguageHeads,
    };
    info!("head-wise {} patching for {lang} over {} examples", mode.name(), examples.len());
    let grid = head_grid(&session, &examples, pm)?;
    let model_hash = hash_file(&cfg.out.join(CHECKPOINT))?;
    let title = format!("{} heads, {lang}", mode.name());
    save_grid(cfg, &grid, &head_grid_rel(mode, lang), &title, &model_hash, &mut m)?;
    m.note("n_examples", examples.len());
    m.note("mean_gap", grid.mean_gap);
    m.write(&cfg.out)?;
    Ok(())
}

pub fn patch_layers(cfg: &RunConfig, mode: ModeArg, lang: LangId) -> Result<()> {
    let mut m = Manifest::new(&layer_stage(lang), cfg);
    let (model, rep) = certified_inputs(cfg, &mut m)?;
    let session = Certified::new(&model, &rep)?;
    let examples = load_examples(cfg, mode, lang, &mut m)?;
    info!("layer-wise patching for {lang} over {} examples", examples.len());
    let grid = layerwise_sweep(&session, &examples)?;
    let model_hash = hash_file(&cfg.out.join(CHECKPOINT))?;
    save_grid(cfg, &grid, &layer_grid_rel(lang), &format!("layers × trigger positions, {lang}"), &model_hash, &mut m)?;
    m.note("n_examples", examples.len());
    m.note("mean_gap", grid.mean_gap);
    m.write(&cfg.out)?;
    Ok(())
}

fn trigger_label(lang: LangId) -> String {
    format!("trigger-{lang}")
}

fn language_label(lang: LangId) -> String {
    format!("lang-{lang}")
}

fn load_head_grids(cfg: &RunConfig, mode: ModeArg, langs: &[LangId], m: &mut Manifest) -> Result<Vec<(String, PatchGrid)>> {
    langs
        .iter()
        .map(|&lang| {
            let rel = head_grid_rel(mode, lang);
            require(&cfg.out.join(&rel))?;
            m.upstream(&cfg.out, &head_stage(mode, lang))?;
            m.input(&cfg.out, &rel)?;
            let (grid, _) = PatchGrid::load(&cfg.out.join(&rel))?;
            let label = match mode {
                ModeArg::Trigger => trigger_label(lang),
                ModeArg::Language => language_label(lang),
            };
            Ok((label, grid))
        })
        .collect()
}

pub fn overlap(cfg: &RunConfig) -> Result<()> {
    let out = &cfg.out;
    let mut m = Manifest::new("overlap", cfg);
    let trig = load_head_grids(cfg, ModeArg::Trigger, &LangId::TRIGGERABLE, &mut m)?;
    let lang = load_head_grids(cfg, ModeArg::Language, &LangId::NON_ENGLISH, &mut m)?;
    let seed = m.seed("baseline", derive_seed(cfg.seed, "baseline"));
    let p = &cfg.patch;
    let study = overlap_study(&trig, &lang, p.k, p.trials, seed, &p.k_grid, |l| {
        l.strip_prefix("trigger-").map(|c| format!("lang-{c}"))
    })?;
    for set in study.trigger_sets.iter().chain(&study.language_sets) {
        let rel = format!("overlap/sets/{}.json", set.label);
        write_json(&out.join(&rel), set)?;
        m.output(out, &rel)?;
    }
    write_json(&out.join(STUDY), &study)?;
    m.output(out, STUDY)?;
    for (name, matrix, title) in [
        ("trigger_vs_language", &study.trigger_vs_language, "Jaccard: trigger vs. language heads"),
        ("language_vs_language", &study.language_vs_language, "Jaccard: language vs. language heads"),
    ] {
        let json = format!("overlap/{name}.json");
        let svg = format!("overlap/{name}.svg");
        matrix.save(&out.join(&json))?;
        emit_matrix_heatmap(matrix, title, &out.join(&svg))?;
        m.output(out, &json)?;
        m.output(out, &svg)?;
    }
    m.note("k", p.k);
    m.note("trials", p.trials);
    m.note("baseline_mean", study.baseline.mean);
    m.note("baseline_std", study.baseline.std);
    m.write(out)?;
    for l in LangId::TRIGGERABLE {
        if let Some(j) = study.pair(&trigger_label(l), &language_label(l)) {
            info!("J(trigger-{l}, lang-{l}) = {j:.3} (baseline {:.3} ± {:.3})", study.baseline.mean, study.baseline.std);
        }
    }
    Ok(())
}

/// Returns whether the oracle check passed.
pub fn oracle_validate(cfg: &RunConfig, mutate_position_offset: usize) -> Result<bool> {
    let out = &cfg.out;
    let mut m = Manifest::new("oracle-validate", cfg);
    let seed = m.seed("oracle", derive_seed(cfg.seed, "oracle"));
    let lab = OracleLab::build(cfg.oracle.n_examples, seed)?;
    let opts = SweepOptions {
        mutate_position_offset,
    };
    let v = validate_oracle(&lab, opts)?;
    let md = v.to_markdown();
    write_text(&out.join("oracle/validation.md"), &md)?;
    write_json(&out.join(ORACLE_JSON), &v)?;
    let model_hash = lab.model.fingerprint();
    save_grid(cfg, &v.head_grid, "oracle/heads.csv", "oracle heads", &model_hash, &mut m)?;
    save_grid(cfg, &v.layer_grid, "oracle/layers.csv", "oracle layers × trigger positions", &model_hash, &mut m)?;
    m.output(out, "oracle/validation.md")?;
    m.output(out, ORACLE_JSON)?;
    m.note("passed", v.passed());
    m.note("mutate_position_offset", mutate_position_offset);
    m.write(out)?;
    print!("{md}");
    Ok(v.passed())
}

/// Pass/fail lines for the trained-model criteria.
pub fn trained_model_checks(
    rep: &EfficacyReport,
    study: &OverlapStudy,
    layers: &[(String, PatchGrid)],
) -> Vec<AcceptanceLine> {
    let mut lines = vec![AcceptanceLine {
        name: "trigger efficacy gate".into(),
        passed: rep.gate_passed(),
        detail: rep
            .per_lang
            .iter()
            .map(|(l, e)| format!("{l}: {:.3}/{:.3}", e.switch_rate_with_trigger, e.false_switch_rate))
            .collect::<Vec<_>>()
            .join(", "),
    }];
    let bar = study.baseline.threshold();
    for l in LangId::TRIGGERABLE {
        if let Some(j) = study.pair(&trigger_label(l), &language_label(l)) {
            lines.push(AcceptanceLine {
                name: format!("J(trigger-{l}, lang-{l}) above baseline"),
                passed: j > bar,
                detail: format!("{j:.3} vs {bar:.3}"),
            });
        }
    }
    let off = study.language_vs_language.off_diagonal();
    let min = off.iter().copied().fold(f64::INFINITY, f64::min);
    lines.push(AcceptanceLine {
        name: "language-language overlaps above baseline".into(),
        passed: !off.is_empty() && min > bar,
        detail: format!("min {min:.3} vs {bar:.3}"),
    });
    for (label, g) in layers {
        let half = g.n_layers() / 2;
        let last = g.n_cols() - 1;
        let reached = (0..half).map(|l| g.get(l, last)).fold(f64::NEG_INFINITY, f64::max);
        let frac = reached / g.mean_gap;
        lines.push(AcceptanceLine {
            name: format!("{label}: final-token Δ ≥ 80% of gap by half depth"),
            passed: frac >= 0.8,
            detail: format!("{:.0}% of {:.3} by layer {}", 100.0 * frac, g.mean_gap, half.saturating_sub(1)),
        });
    }
    lines
}

pub fn report_cmd(cfg: &RunConfig) -> Result<()> {
    let out = &cfg.out;
    let h = cfg.hash();
    verify_chain(out, "overlap", &h)?;
    for lang in LangId::TRIGGERABLE {
        verify_chain(out, &layer_stage(lang), &h)?;
    }
    let mut m = Manifest::new("report", cfg);
    m.upstream(out, "overlap")?;
    let model = load_model(out)?;
    let rep: EfficacyReport = read_json(&out.join(EFFICACY))?;
    let study: OverlapStudy = read_json(&out.join(STUDY))?;
    let grids = |mode| -> Result<Vec<(String, PatchGrid)>> {
        let langs: &[LangId] = match mode {
            ModeArg::Trigger => &LangId::TRIGGERABLE,
            ModeArg::Language => &LangId::NON_ENGLISH,
        };
        langs
            .iter()
            .map(|&l| Ok((format!("{} {l}", mode_title(mode)), PatchGrid::load(&out.join(head_grid_rel(mode, l)))?.0)))
            .collect()
    };
    let mut layers = Vec::new();
    for lang in LangId::TRIGGERABLE {
        m.upstream(out, &layer_stage(lang))?;
        layers.push((format!("layers {lang}"), PatchGrid::load(&out.join(layer_grid_rel(lang)))?.0));
    }
    let mut acceptance = trained_model_checks(&rep, &study, &layers);
    if out.join(ORACLE_JSON).exists() {
        verify_chain(out, "oracle-validate", &h)?;
        m.upstream(out, "oracle-validate")?;
        let v: OracleValidation = read_json(&out.join(ORACLE_JSON))?;
        acceptance.push(AcceptanceLine {
            name: "oracle recovery".into(),
            passed: v.passed(),
            detail: format!(
                "planted rank {}, consolidation found {:?} vs {}",
                v.planted_rank, v.consolidation_found, v.consolidation_truth
            ),
        });
    }
    let mut figures: Vec<String> = Vec::new();
    for mode in [ModeArg::Trigger, ModeArg::Language] {
        let langs: &[LangId] = if mode == ModeArg::Trigger { &LangId::TRIGGERABLE } else { &LangId::NON_ENGLISH };
        figures.extend(langs.iter().map(|&l| head_grid_rel(mode, l).replace(".csv", ".svg")));
    }
    figures.extend(LangId::TRIGGERABLE.iter().map(|&l| layer_grid_rel(l).replace(".csv", ".svg")));
    figures.push("overlap/trigger_vs_language.svg".into());
    figures.push("overlap/language_vs_language.svg".into());

    let inputs = ReportInputs {
        checkpoint_hash: Some(model.fingerprint()),
        efficacy: Some(rep),
        trigger_grids: grids(ModeArg::Trigger)?,
        language_grids: grids(ModeArg::Language)?,
        layer_grids: layers,
        trigger_vs_language: Some(study.trigger_vs_language.clone()),
        language_vs_language: Some(study.language_vs_language.clone()),
        k_sensitivity: study.k_sensitivity.clone(),
        acceptance,
        figures,
    };
    let md = report(&inputs)?;
    write_text(&out.join(REPORT), &md)?;
    m.output(out, REPORT)?;
    m.write(out)?;
    info!("report written to {}", out.join(REPORT).display());
    Ok(())
}

fn mode_title(mode: ModeArg) -> &'static str {
    match mode {
        ModeArg::Trigger => "trigger heads",
        ModeArg::Language => "language heads",
    }
}
