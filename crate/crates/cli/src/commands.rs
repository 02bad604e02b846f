use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use inflect_core::eval::{compare_reports, evaluate_model, Comparison, EvalReport, LanguageScore};
use inflect_core::model::{
    count_params, decode_many, dev_accuracy, init_model, train as fit, Checkpoint, DevSet, ModelConfig,
};
use inflect_core::sampler::{encode_source, EpochPlan};
use inflect_core::split::{config_from_header, SplitAssignment};
use inflect_core::store::{read_canonical_with_header, read_queries, write_canonical_with_header, write_predictions, ColumnOrder, InputFormat};
use inflect_core::{
    audit_split, extract_triples, group_by_lemma, merge_triplesets, parse_conllu, read_canonical, sample_split,
    ExtractOptions, Split, TripleSet, Vocab,
};

use crate::config::{data_root, resolve, Mode, RunConfig};
use crate::{EvaluateArgs, ExtractArgs, PredictArgs, QueryFormat, SplitArgs, StatsArgs, TrainArgs, UsageError};

const CHECKPOINT_FILE: &str = "model.ckpt";
const VOCAB_FILE: &str = "vocab.txt";
const SNAPSHOT_FILE: &str = "config.resolved.toml";

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes())?;
    w.flush()?;
    Ok(())
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?))
}

fn read_set(path: &Path, language: &str) -> Result<(Vec<String>, TripleSet)> {
    read_canonical_with_header(open(path)?, language).with_context(|| path.display().to_string())
}

pub fn extract(cfg: &RunConfig, a: ExtractArgs) -> Result<()> {
    let options = ExtractOptions {
        skip_underscore: !a.keep_underscore,
        skip_upos: a.skip_upos.iter().cloned().collect(),
        lowercase: a.lowercase,
        nfc: a.nfc,
    };
    let mut set = TripleSet::new(&a.language);
    for path in &a.inputs {
        let sentences = parse_conllu(open(path)?).with_context(|| path.display().to_string())?;
        set = merge_triplesets(&set, &extract_triples(&sentences, &a.language, &options))?;
    }
    let output = a
        .output
        .unwrap_or_else(|| resolve(&data_root(), &cfg.paths.corpora).join(format!("{}.tsv", a.language)));
    let sources: Vec<String> = a.inputs.iter().map(|p| p.display().to_string()).collect();
    let header = vec![
        "inflect-corpus v1".to_owned(),
        format!("language={}", a.language),
        format!("sources={}", sources.join(",")),
        format!("options={}", options.describe()),
        format!("options_digest={}", options.digest()),
    ];
    write_canonical_with_header(&set, &header, create(&output)?)?;
    println!(
        "{}: {} types, {} tokens -> {}",
        a.language,
        set.total_type_count(),
        set.total_token_mass(),
        output.display()
    );
    Ok(())
}

fn split_path(dir: &Path, split: Split) -> PathBuf {
    dir.join(format!("{split}.tsv"))
}

pub fn split(cfg: &RunConfig, a: SplitArgs) -> Result<()> {
    let root = data_root();
    let input = a
        .input
        .unwrap_or_else(|| resolve(&root, &cfg.paths.corpora).join(format!("{}.tsv", a.language)));
    let out = a.out_dir.unwrap_or_else(|| resolve(&root, &cfg.paths.splits).join(&a.language));
    let (_, set) = read_set(&input, &a.language)?;
    if a.audit {
        return reaudit(&out, &set);
    }

    let mut snapshot = cfg.clone();
    if let Some(seed) = a.seed {
        snapshot.split.seed = seed;
    }
    if let Some(r) = a.ratios {
        snapshot.split.ratios = [r[0], r[1], r[2]];
    }
    if let Some(m) = a.min_lemmas {
        snapshot.split.min_lemmas_per_split = m;
    }
    let config = snapshot.split.to_config();
    config.validate().map_err(|e| usage(e.to_string()))?;
    if let Some(existing) = Split::ALL.iter().map(|&s| split_path(&out, s)).find(|p| p.exists() && !a.force) {
        return Err(usage(format!("{} exists; pass --force to replace the split", existing.display())));
    }

    let groups = group_by_lemma(&set)?;
    let assignment = sample_split(&groups, &a.language, &config)?;
    let report = audit_split(&assignment, &set)?;
    if !report.passed() {
        bail!("split failed its audit:\n{report}");
    }
    let digest = report.digest();
    let sets = inflect_core::materialize_split(&assignment, &set);
    for s in Split::ALL {
        let mut header = assignment.header_lines(s, &digest);
        header.push(format!("source={}", input.display()));
        write_canonical_with_header(&sets[s.index()], &header, create(&split_path(&out, s))?)?;
    }
    write_text(&out.join("audit.txt"), &report.to_key_values())?;
    write_text(&out.join(SNAPSHOT_FILE), &snapshot.resolved(&root).to_toml())?;
    println!("{report}");
    Ok(())
}

/// Rebuilds the assignment from the split files in `dir` and audits it
/// against the full corpus.
fn reaudit(dir: &Path, set: &TripleSet) -> Result<()> {
    let mut headers = Vec::new();
    let mut parts = Vec::new();
    for s in Split::ALL {
        let (h, part) = read_set(&split_path(dir, s), set.language())?;
        headers.push(h);
        parts.push(part);
    }
    let config = config_from_header(&headers[0])?;
    let assignment = SplitAssignment::from_sets(config, [&parts[0], &parts[1], &parts[2]]);
    let report = audit_split(&assignment, set)?;
    println!("{report}");
    if !report.passed() {
        bail!("split in {} failed its audit", dir.display());
    }
    let recorded = headers[0].iter().find_map(|l| l.strip_prefix("audit_digest="));
    if recorded != Some(report.digest().as_str()) {
        eprintln!("warning: audit differs from the one recorded when the split was written");
    }
    Ok(())
}

/// Keeps the triples that fit the model's length limits.
fn fit_lengths(set: &TripleSet, vocab: &Vocab, config: &ModelConfig) -> (TripleSet, usize) {
    let mut kept = TripleSet::new(set.language());
    let mut dropped = 0;
    for t in set.iter() {
        let src = encode_source(t.lemma, &t.tags(), set.language(), vocab).len();
        if src <= config.max_source_len && t.form.chars().count() < config.max_target_len {
            kept.insert(&t.to_triple(set.language())).expect("subset of a valid set");
        } else {
            dropped += 1;
        }
    }
    (kept, dropped)
}

pub fn train(mut cfg: RunConfig, a: TrainArgs) -> Result<()> {
    if let Some(m) = a.mode {
        cfg.mode = m;
    }
    if let Some(l) = a.languages.clone() {
        cfg.languages = l;
    }
    if let Some(e) = a.max_epochs {
        cfg.train.max_epochs = e;
    }
    if let Some(b) = a.batch_size {
        cfg.sampler.batch_size = Some(b);
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
        cfg.sampler.seed = s;
    }
    if let Some(t) = a.temperature {
        cfg.sampler.temperature = t;
    }
    if a.patience.is_some() {
        cfg.train.patience = a.patience;
    }
    if cfg.languages.is_empty() {
        return Err(usage("no languages given (use --languages or `languages` in the config)"));
    }
    let root = data_root();
    let splits = a.splits_dir.clone().unwrap_or_else(|| resolve(&root, &cfg.paths.splits));
    let mode_name = match cfg.mode {
        Mode::Mono => "mono",
        Mode::Multi => "multi",
    };
    let out = a.out_dir.clone().unwrap_or_else(|| resolve(&root, &cfg.paths.checkpoints).join(mode_name));

    let mut data = Vec::new();
    for lang in &cfg.languages {
        let (_, tr) = read_set(&split_path(&splits.join(lang), Split::Train), lang)?;
        let (_, dv) = read_set(&split_path(&splits.join(lang), Split::Dev), lang)?;
        data.push((tr, dv));
    }
    let snapshot = cfg.resolved(&root);
    match cfg.mode {
        Mode::Mono => {
            for (tr, dv) in &data {
                train_one(&cfg, &snapshot, &[tr], &[dv], &out.join(tr.language()), &a)?;
            }
        }
        Mode::Multi => {
            let trains: Vec<&TripleSet> = data.iter().map(|d| &d.0).collect();
            let devs: Vec<&TripleSet> = data.iter().map(|d| &d.1).collect();
            train_one(&cfg, &snapshot, &trains, &devs, &out, &a)?;
        }
    }
    Ok(())
}

fn train_one(
    cfg: &RunConfig,
    snapshot: &RunConfig,
    trains: &[&TripleSet],
    devs: &[&TripleSet],
    dir: &Path,
    a: &TrainArgs,
) -> Result<()> {
    let ckpt_path = dir.join(CHECKPOINT_FILE);
    if ckpt_path.exists() && !a.force {
        return Err(usage(format!("{} exists; pass --force to retrain", ckpt_path.display())));
    }
    let name = trains.iter().map(|t| t.language()).collect::<Vec<_>>().join(",");
    let vocab = Vocab::build(trains)?;
    let model_config = cfg.model_config(vocab.len());
    model_config.validate().map_err(|e| usage(e.to_string()))?;

    let mut dropped = 0;
    let mut fitted = |sets: &[&TripleSet]| -> Vec<TripleSet> {
        sets.iter()
            .map(|s| {
                let (kept, n) = fit_lengths(s, &vocab, &model_config);
                dropped += n;
                kept
            })
            .collect()
    };
    let train_sets = fitted(trains);
    let dev_sets = fitted(devs);
    if dropped > 0 {
        eprintln!("{name}: skipped {dropped} items longer than the model's length limits");
    }
    let train_refs: Vec<&TripleSet> = train_sets.iter().collect();
    let plan = EpochPlan::new(&train_refs, &vocab, cfg.sampler_config())?;
    let dev_sets: Vec<DevSet> = dev_sets.iter().map(|d| DevSet::from_triples(d, &vocab)).collect();
    let model = init_model::<f32>(&model_config, vocab.len(), cfg.init_seed())?;
    let train_config = cfg.train.to_config();
    let quiet = a.quiet;
    let outcome = fit(model, &plan, &vocab, &train_config, &dev_sets, &mut |row| {
        if !quiet {
            if let Some(m) = row.dev_metric {
                eprintln!("{name}: epoch {} step {} loss {:.4} dev {m:.2}", row.epoch + 1, row.step, row.loss);
            }
        }
    })?;

    let checkpoint = Checkpoint { model: outcome.model, vocab_digest: vocab.digest() };
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    checkpoint.save(create(&ckpt_path)?)?;
    write_text(&dir.join(VOCAB_FILE), &vocab.to_text())?;
    write_text(&dir.join("train_log.tsv"), &outcome.log.to_tsv())?;
    write_text(&dir.join(SNAPSHOT_FILE), &snapshot.to_toml())?;

    let mut summary = String::new();
    let _ = writeln!(summary, "languages = {:?}", trains.iter().map(|t| t.language()).collect::<Vec<_>>());
    let _ = writeln!(summary, "train_items = {}", train_refs.iter().map(|t| t.len()).sum::<usize>());
    let _ = writeln!(summary, "dropped_items = {dropped}");
    let _ = writeln!(summary, "vocab_size = {}", vocab.len());
    let _ = writeln!(summary, "parameters = {}", count_params(&model_config, vocab.len()));
    if let Some(m) = outcome.best_metric {
        let _ = writeln!(summary, "best_dev_metric = {m}");
    }
    let _ = writeln!(summary, "best_epoch = {}", outcome.best_epoch + 1);
    let _ = writeln!(summary, "best_step = {}", outcome.best_step);
    let _ = writeln!(summary, "epochs_run = {}", outcome.epochs_run);
    let _ = writeln!(summary, "vocab_digest = \"{}\"", hex(&vocab.digest()));
    let _ = writeln!(summary, "checkpoint_digest = \"{}\"", hex(&checkpoint.digest()));
    if a.report_train_accuracy {
        for set in &train_sets {
            let acc = dev_accuracy(&checkpoint.model, &vocab, &DevSet::from_triples(set, &vocab), 64)?;
            println!("{}: train exact-match {acc:.2}", set.language());
            let _ = writeln!(summary, "train_accuracy_{} = {acc}", set.language());
        }
    }
    write_text(&dir.join("summary.toml"), &summary)?;
    match outcome.best_metric {
        Some(m) => println!("{name}: best dev {m:.2} at epoch {} -> {}", outcome.best_epoch + 1, ckpt_path.display()),
        None => println!("{name}: trained {} epochs -> {}", outcome.epochs_run, ckpt_path.display()),
    }
    Ok(())
}

/// The directory holding the model for `language` inside a run directory.
fn model_dir(run: &Path, language: &str) -> Result<PathBuf> {
    if run.join(CHECKPOINT_FILE).exists() {
        return Ok(run.to_path_buf());
    }
    if run.join(language).join(CHECKPOINT_FILE).exists() {
        return Ok(run.join(language));
    }
    let mut known: Vec<String> = fs::read_dir(run)
        .with_context(|| format!("reading {}", run.display()))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().join(CHECKPOINT_FILE).exists())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    known.sort();
    bail!("no model for language {language:?} in {} (available: {})", run.display(), known.join(", "))
}

fn load_model(checkpoint: &Path, vocab: &Path) -> Result<(Checkpoint, Vocab)> {
    let text = fs::read_to_string(vocab).with_context(|| format!("reading {}", vocab.display()))?;
    let vocab = Vocab::from_text(&text).with_context(|| vocab.display().to_string())?;
    let ckpt = Checkpoint::load(open(checkpoint)?, Some(&vocab.digest())).with_context(|| checkpoint.display().to_string())?;
    Ok((ckpt, vocab))
}

fn require_language(vocab: &Vocab, language: &str) -> Result<()> {
    if vocab.lang_id(language).is_none() {
        bail!(
            "language {language:?} is not in the model vocabulary (known: {})",
            vocab.languages().join(", ")
        );
    }
    Ok(())
}

pub fn predict(a: PredictArgs) -> Result<()> {
    let (ckpt_path, vocab_path) = match (&a.model, &a.checkpoint, &a.vocab) {
        (Some(run), _, _) => {
            let dir = model_dir(run, &a.language)?;
            (dir.join(CHECKPOINT_FILE), dir.join(VOCAB_FILE))
        }
        (None, Some(c), Some(v)) => (c.clone(), v.clone()),
        _ => return Err(usage("give --model, or --checkpoint with --vocab")),
    };
    let (ckpt, vocab) = load_model(&ckpt_path, &vocab_path)?;
    require_language(&vocab, &a.language)?;
    let format = match a.format {
        QueryFormat::Canonical => InputFormat::Canonical,
        QueryFormat::LemmaFormTags => InputFormat::Sigmorphon(ColumnOrder::LemmaFormTags),
        QueryFormat::LemmaTagsForm => InputFormat::Sigmorphon(ColumnOrder::LemmaTagsForm),
    };
    let queries = read_queries(open(&a.input)?, format).with_context(|| a.input.display().to_string())?;
    let sources: Vec<Vec<u32>> = queries.iter().map(|q| encode_source(&q.lemma, &q.tags, &a.language, &vocab)).collect();
    let refs: Vec<&[u32]> = sources.iter().map(Vec::as_slice).collect();
    let model = &ckpt.model;
    let decoded = decode_many(model, &vocab, &refs, model.config.max_target_len, 64)?;
    let forms: Vec<&str> = decoded.iter().map(|d| d.form.as_str()).collect();
    if a.output.as_os_str() == "-" {
        write_predictions(&queries, &forms, std::io::stdout().lock())?;
    } else {
        write_predictions(&queries, &forms, create(&a.output)?)?;
    }
    let golds: Option<Vec<&str>> = queries.iter().map(|q| q.gold.as_deref().filter(|g| !g.is_empty())).collect();
    match golds {
        Some(g) if !g.is_empty() => {
            let hits = g.iter().zip(&forms).filter(|(g, p)| g == p).count();
            eprintln!("{} predictions; exact match with input forms {:.2}", forms.len(), 100.0 * hits as f64 / g.len() as f64);
        }
        _ => eprintln!("{} predictions", forms.len()),
    }
    Ok(())
}

/// `language=path` pairs, or every configured language's test split.
fn test_files(cfg: &RunConfig, a: &EvaluateArgs) -> Result<Vec<(String, PathBuf)>> {
    if !a.tests.is_empty() {
        return a
            .tests
            .iter()
            .map(|t| {
                let (lang, path) = t.split_once('=').ok_or_else(|| usage(format!("--test {t:?} is not language=path")))?;
                Ok((lang.to_owned(), PathBuf::from(path)))
            })
            .collect();
    }
    let languages = a.languages.clone().unwrap_or_else(|| cfg.languages.clone());
    if languages.is_empty() {
        return Err(usage("no test sets given (use --test language=path or configure languages)"));
    }
    let splits = resolve(&data_root(), &cfg.paths.splits);
    Ok(languages.into_iter().map(|l| (l.clone(), split_path(&splits.join(&l), Split::Test))).collect())
}

struct Evaluation {
    report: EvalReport,
    /// `language -> (lemma, tags, gold, prediction)` rows.
    predictions: BTreeMap<String, Vec<[String; 4]>>,
}

fn evaluate_run(run: &Path, tests: &[(String, TripleSet)], comparison: Comparison) -> Result<Evaluation> {
    let mut loaded: BTreeMap<PathBuf, (Checkpoint, Vocab)> = BTreeMap::new();
    let mut scores: Vec<LanguageScore> = Vec::new();
    let mut digests = Vec::new();
    let mut predictions = BTreeMap::new();
    for (lang, set) in tests {
        let dir = model_dir(run, lang)?;
        if !loaded.contains_key(&dir) {
            let model = load_model(&dir.join(CHECKPOINT_FILE), &dir.join(VOCAB_FILE))?;
            loaded.insert(dir.clone(), model);
        }
        let (ckpt, vocab) = &loaded[&dir];
        require_language(vocab, lang).with_context(|| dir.display().to_string())?;
        let (report, decoded) = evaluate_model(ckpt, &[set], vocab, comparison)?;
        digests.push(format!("{lang}:{}", report.checkpoint_digest.clone().unwrap_or_default()));
        scores.extend(report.languages);
        let rows = set
            .iter()
            .zip(&decoded[0])
            .map(|(t, d)| [t.lemma.to_owned(), t.tag_string.to_owned(), t.form.to_owned(), d.form.clone()])
            .collect();
        predictions.insert(lang.clone(), rows);
    }
    let mut report = EvalReport::from_scores(scores, comparison);
    report.checkpoint_digest = Some(digests.join(","));
    Ok(Evaluation { report, predictions })
}

fn dir_name(path: &Path) -> String {
    path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned())
}

fn write_evaluation(out: &Path, name: &str, eval: &Evaluation) -> Result<()> {
    write_text(&out.join(format!("{name}.report.tsv")), &eval.report.to_tsv())?;
    write_text(&out.join(format!("{name}.report.txt")), &eval.report.render_table())?;
    for (lang, rows) in &eval.predictions {
        let mut text = String::from("lemma\ttags\tgold\tprediction\n");
        for r in rows {
            let _ = writeln!(text, "{}", r.join("\t"));
        }
        write_text(&out.join("predictions").join(name).join(format!("{lang}.tsv")), &text)?;
    }
    Ok(())
}

pub fn evaluate(cfg: RunConfig, a: EvaluateArgs) -> Result<()> {
    let root = data_root();
    let comparison = if a.nfc { Comparison::Nfc } else { Comparison::Bytes };
    let mut tests = Vec::new();
    let mut split_digests = Vec::new();
    for (lang, path) in test_files(&cfg, &a)? {
        let (header, set) = read_set(&path, &lang)?;
        if let Some(d) = header.iter().find_map(|l| l.strip_prefix("audit_digest=")) {
            split_digests.push(format!("{lang}:{d}"));
        }
        tests.push((lang, set));
    }
    let out = a.out_dir.clone().unwrap_or_else(|| resolve(&root, &cfg.paths.reports));
    let names = a.names.clone().unwrap_or_else(|| {
        let first = dir_name(&a.model);
        let second = a.compare.as_deref().map(dir_name).unwrap_or_default();
        if first == second {
            vec!["first".to_owned(), "second".to_owned()]
        } else {
            vec![first, second]
        }
    });
    let split_digest = (!split_digests.is_empty()).then(|| split_digests.join(","));

    let mut first = evaluate_run(&a.model, &tests, comparison)?;
    first.report.split_digest = split_digest.clone();
    write_evaluation(&out, &names[0], &first)?;
    write_text(&out.join(SNAPSHOT_FILE), &cfg.resolved(&root).to_toml())?;
    match &a.compare {
        None => print!("{}", first.report.render_table()),
        Some(other) => {
            let mut second = evaluate_run(other, &tests, comparison)?;
            second.report.split_digest = split_digest;
            write_evaluation(&out, &names[1], &second)?;
            let cmp = compare_reports(&first.report, &second.report, (&names[0], &names[1]))?;
            write_text(&out.join("comparison.tsv"), &cmp.to_tsv())?;
            write_text(&out.join("comparison.txt"), &cmp.render_table())?;
            print!("{}", cmp.render_table());
        }
    }
    Ok(())
}

pub fn stats(a: StatsArgs) -> Result<()> {
    println!("{:<24} {:>8} {:>8} {:>10} {:>8} {:>8} {:>8}", "file", "lemmas", "types", "tokens", "bundles", "copy%", "formlen");
    for path in &a.inputs {
        let language = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let set = read_canonical(open(path)?, &language).with_context(|| path.display().to_string())?;
        let lemmas: std::collections::BTreeSet<&str> = set.iter().map(|t| t.lemma).collect();
        let bundles: std::collections::BTreeSet<&str> = set.iter().map(|t| t.tag_string).collect();
        let n = set.len().max(1) as f64;
        let copies = set.iter().filter(|t| t.lemma == t.form).count() as f64;
        let form_len = set.iter().map(|t| t.form.chars().count()).sum::<usize>() as f64;
        println!(
            "{:<24} {:>8} {:>8} {:>10} {:>8} {:>8.2} {:>8.2}",
            path.display(),
            lemmas.len(),
            set.len(),
            set.total_token_mass(),
            bundles.len(),
            100.0 * copies / n,
            form_len / n
        );
    }
    Ok(())
}
