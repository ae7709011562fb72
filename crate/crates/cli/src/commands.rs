use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clar::analysis::{manifold_report, pair_segments, paired_rows, svd_project};
use clar::config::KeyValues;
use clar::label_space::{
    count_label_frequencies, load_weight_matrix, parse_conll, save_weight_matrix, write_conll, Corpus, FrequencyTable,
    LabeledMatrix,
};
use clar::matcher::{match_labels, MatchConfig, Pairing};
use clar::regularizer::AffineTransform;
use clar::synth::{generate_task, SynthConfig};
use clar::tagger::{combined_label_map, evaluate_relabeled, load_model, save_model, train, TrainConfig};
use clar::{ClarError, Matrix};

use crate::manifest::Run;
use crate::{Cli, Command};

pub fn run(cli: &Cli) -> Result<()> {
    let out = cli.output_dir.as_path();
    match &cli.command {
        Command::Freq { input, language, output } => freq(cli, out, input, language, output),
        Command::Match {
            source_weights,
            target_weights,
            source_freq,
            target_freq,
            threshold,
            cardinality,
            capacity,
            output,
        } => {
            let cfg = MatchConfig {
                frequency_threshold: *threshold,
                cardinality: *cardinality,
                source_capacity: *capacity,
            };
            match_cmd(cli, out, [source_weights, target_weights, source_freq, target_freq], &cfg, output)
        }
        Command::Train { config } => train_cmd(cli, out, config),
        Command::Synth { config } => synth_cmd(cli, out, config),
        Command::Evaluate { model, corpus, language, pairing, combine_mapped } => {
            evaluate_cmd(cli, out, model, corpus, language, pairing.as_deref(), *combine_mapped)
        }
        Command::Analyze { source_weights, target_weights, pairing, components, transform } => {
            analyze_cmd(cli, out, source_weights, target_weights, pairing, *components, transform.as_deref())
        }
    }
}

fn start(cli: &Cli, out: &Path, name: &str) -> Result<Run> {
    let mut run = Run::start(name, out)?;
    if let Some(seed) = cli.seed {
        run.seed(seed);
    }
    Ok(run)
}

fn read_corpus(run: &mut Run, path: &Path, language: &str) -> Result<Corpus> {
    let text = run.read(path)?;
    let sentences = parse_conll(&text, language).with_context(|| format!("parsing {}", path.display()))?;
    if sentences.is_empty() {
        return Err(anyhow::Error::new(ClarError::Degenerate(format!("{} contains no sentences", path.display()))));
    }
    Ok(Corpus::new(language, sentences))
}

fn read_weights(run: &mut Run, path: &Path) -> Result<LabeledMatrix> {
    let text = run.read(path)?;
    load_weight_matrix(&text).with_context(|| format!("parsing {}", path.display()))
}

fn read_freq(run: &mut Run, path: &Path) -> Result<FrequencyTable> {
    let text = run.read(path)?;
    FrequencyTable::from_tsv(&text).with_context(|| format!("parsing {}", path.display()))
}

fn read_pairing(run: &mut Run, path: &Path) -> Result<Pairing> {
    let text = run.read(path)?;
    Pairing::from_tsv(&text).with_context(|| format!("parsing {}", path.display()))
}

fn read_config(run: &mut Run, path: &Path) -> Result<KeyValues> {
    let text = run.read(path)?;
    KeyValues::parse(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Paths inside a config file are relative to the file itself.
fn resolve(config: &Path, value: &str) -> PathBuf {
    let p = Path::new(value);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        config.parent().unwrap_or(Path::new(".")).join(p)
    }
}

fn freq(cli: &Cli, out: &Path, input: &Path, language: &str, output: &str) -> Result<()> {
    let mut run = start(cli, out, "freq")?;
    run.config("language", language);
    let corpus = read_corpus(&mut run, input, language)?;
    run.write(output, &count_label_frequencies(&corpus).to_tsv())?;
    run.finish()
}

fn match_cmd(cli: &Cli, out: &Path, paths: [&PathBuf; 4], cfg: &MatchConfig, output: &str) -> Result<()> {
    let mut run = start(cli, out, "match")?;
    run.config("threshold", cfg.frequency_threshold);
    run.config("cardinality", cfg.effective_cardinality());
    run.config("capacity", cfg.source_capacity);
    let [sw, tw, sf, tf] = paths;
    let source = read_weights(&mut run, sw)?;
    let target = read_weights(&mut run, tw)?;
    let freq_s = read_freq(&mut run, sf)?;
    let freq_t = read_freq(&mut run, tf)?;
    let pairing = match_labels(&source, &target, &freq_s, &freq_t, cfg)?;
    run.write(output, &pairing.to_tsv())?;
    run.finish()
}

fn train_cmd(cli: &Cli, out: &Path, config: &Path) -> Result<()> {
    let mut run = start(cli, out, "train")?;
    let mut kv = read_config(&mut run, config)?;
    let source_path: String = kv.take_required("source")?;
    let target_path: String = kv.take_required("target")?;
    let dev_path: Option<String> = kv.take("dev")?;
    let source_language: String = kv.take_or("source_language", "src".to_string())?;
    let target_language: String = kv.take_or("target_language", "tgt".to_string())?;
    let mut cfg = TrainConfig::from_key_values(&mut kv)?;
    kv.finish()?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    run.seed(cfg.seed);
    run.config_text(&cfg.to_config_text());
    run.config("source", &source_path);
    run.config("target", &target_path);
    run.config("dev", dev_path.as_deref().unwrap_or("none"));
    run.config("source_language", &source_language);
    run.config("target_language", &target_language);

    let source = read_corpus(&mut run, &resolve(config, &source_path), &source_language)?;
    let target = read_corpus(&mut run, &resolve(config, &target_path), &target_language)?;
    let dev = match &dev_path {
        Some(p) => Some(read_corpus(&mut run, &resolve(config, p), &target_language)?),
        None => None,
    };
    let outcome = train(&source, &target, dev.as_ref(), &cfg)?;

    run.write("config.txt", &cfg.to_config_text())?;
    run.write("model.txt", &save_model(&outcome.model))?;
    run.write("history.tsv", &outcome.history.to_tsv())?;
    run.write("source_head.tsv", &save_weight_matrix(&outcome.model.source.head))?;
    run.write("target_head.tsv", &save_weight_matrix(&outcome.model.target.head))?;
    run.write("transform.tsv", &save_weight_matrix(&outcome.model.transform.to_labeled_matrix()))?;
    run.write("source_freq.tsv", &count_label_frequencies(&source).to_tsv())?;
    run.write("target_freq.tsv", &count_label_frequencies(&target).to_tsv())?;
    if let Some(p) = &outcome.pairing {
        run.write("pairing.tsv", &p.to_tsv())?;
    }
    run.finish()
}

fn synth_cmd(cli: &Cli, out: &Path, config: &Path) -> Result<()> {
    let mut run = start(cli, out, "synth")?;
    let mut kv = read_config(&mut run, config)?;
    let mut cfg = SynthConfig::from_key_values(&mut kv)?;
    kv.finish()?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.validate()?;
    }
    run.seed(cfg.seed);
    run.config("num_labels", cfg.num_labels);
    run.config("source_sentences", cfg.source_sentences);
    run.config("target_sentences", cfg.target_sentences);
    run.config("noise", cfg.noise);
    run.config("zipf_exponent", cfg.zipf_exponent);
    if let Some(m) = &cfg.label_merge_map {
        run.config("label_merge_map", m.iter().map(usize::to_string).collect::<Vec<_>>().join(","));
    }
    let task = generate_task(&cfg)?;
    run.write("source.conll", &write_conll(&task.source.sentences))?;
    run.write("target.conll", &write_conll(&task.target.sentences))?;
    run.write("target_dev.conll", &write_conll(&task.target_dev.sentences))?;
    run.write("target_test.conll", &write_conll(&task.target_test.sentences))?;
    run.write("ground_truth.tsv", &task.ground_truth.to_tsv())?;
    run.write("source_freq.tsv", &task.source_tally.to_tsv())?;
    run.write("target_freq.tsv", &task.target_tally.to_tsv())?;
    run.finish()
}

fn evaluate_cmd(
    cli: &Cli,
    out: &Path,
    model: &Path,
    corpus: &Path,
    language: &str,
    pairing: Option<&Path>,
    combine_mapped: bool,
) -> Result<()> {
    let mut run = start(cli, out, "evaluate")?;
    run.config("language", language);
    run.config("combine_mapped", combine_mapped);
    let text = run.read(model)?;
    let model = load_model(&text).with_context(|| format!("parsing {}", model.display()))?;
    let corpus = read_corpus(&mut run, corpus, language)?;
    let relabel = match pairing {
        Some(p) if combine_mapped => combined_label_map(&read_pairing(&mut run, p)?),
        _ => Default::default(),
    };
    let metrics = evaluate_relabeled(&model, &corpus, language, &relabel)?;
    run.write("metrics.tsv", &metrics.to_tsv())?;
    if combine_mapped {
        let merged: BTreeSet<_> = relabel.values().cloned().collect();
        let (p, r, f) = metrics.subset(&merged);
        run.write("merged_metrics.tsv", &format!("precision\t{p}\nrecall\t{r}\nf1\t{f}\n"))?;
    }
    run.finish()
}

fn analyze_cmd(
    cli: &Cli,
    out: &Path,
    source_weights: &Path,
    target_weights: &Path,
    pairing: &Path,
    components: usize,
    transform: Option<&Path>,
) -> Result<()> {
    let mut run = start(cli, out, "analyze")?;
    run.config("components", components);
    run.config("transformed", transform.is_some());
    let source = read_weights(&mut run, source_weights)?;
    let mut target = read_weights(&mut run, target_weights)?;
    let pairing = read_pairing(&mut run, pairing)?;
    if let Some(path) = transform {
        let t = AffineTransform::from_labeled_matrix(&read_weights(&mut run, path)?)?;
        for i in 0..target.len() {
            let mapped = t.apply(target.matrix().row(i));
            target.matrix_mut().row_mut(i).copy_from_slice(&mapped);
        }
    }

    let (u, v) = paired_rows(&source, &target, &pairing)?;
    run.write("manifold.tsv", &manifold_report(&u, &v)?.to_tsv())?;

    // joint projection of the paired rows from both languages
    let mut labels = pairing.sources();
    let mut seen = BTreeSet::new();
    labels.retain(|l| seen.insert(l.clone()));
    let src_rows = source.select(&labels)?;
    let tgt_rows = target.select(&pairing.targets())?;
    let mut all_labels = src_rows.labels().to_vec();
    all_labels.extend_from_slice(tgt_rows.labels());
    let rows: Vec<&[f64]> = src_rows.matrix().iter_rows().chain(tgt_rows.matrix().iter_rows()).collect();
    let joint = LabeledMatrix::new(all_labels, Matrix::from_rows(&rows)?)?;
    let k = components.min(joint.len()).min(joint.dim());
    let projection = svd_project(&joint, k)?;
    run.write("projection.tsv", &projection.to_tsv())?;
    run.write("segments.tsv", &pair_segments(&projection, &pairing)?)?;
    run.finish()
}
