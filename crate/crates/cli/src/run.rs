//! Command implementations: train a transcript, attack it, sweep one axis,
//! and re-score existing results. All outputs are plain text (CSV, JSON,
//! JSON-lines) and byte-stable across re-runs with the same config.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use film_core::attack::{
    dpsgd_bow_attack, extract_bag_of_words, recover_multiple, AttackResult, BeamSearchConfig,
    ExtractionMode, ReorderConfig,
};
use film_core::corpus::{detokenize, Corpus, Sentence, Split, TokenId, Vocab, BOS_ID};
use film_core::fedsim::{run_training, DefenseConfig, Transcript, TranscriptEntry};
use film_core::metrics::{
    multi_sentence_scores, nerr, rouge_scores, token_set_scores, MetricsReport, MultiReport,
    SentenceReport,
};
use film_core::{Error, Result};

use crate::config::{ExperimentConfig, Schedule};

const MULTI_THRESHOLD: f64 = 0.25;

fn load_vocab_and_corpus(cfg: &ExperimentConfig) -> Result<(Vocab, Corpus)> {
    if !cfg.corpus_path.exists() {
        return Err(Error::InvalidConfig(format!(
            "corpus file {} does not exist",
            cfg.corpus_path.display()
        )));
    }
    let vocab = match &cfg.vocab_path {
        Some(p) => {
            if !p.exists() {
                return Err(Error::InvalidConfig(format!(
                    "vocab file {} does not exist",
                    p.display()
                )));
            }
            Vocab::load(p)?
        }
        None => {
            let text = fs::read_to_string(&cfg.corpus_path)?;
            let lines: Vec<String> = text.lines().map(|l| l.to_string()).collect();
            Vocab::build(&lines, cfg.vocab_size)?
        }
    };
    let corpus = Corpus::load(&cfg.corpus_path, &vocab, Split::Train)?;
    Ok((vocab, corpus))
}

fn resolved_hyper(cfg: &ExperimentConfig, vocab: &Vocab) -> film_core::model::Hyperparams {
    film_core::model::Hyperparams {
        vocab_size: vocab.len(),
        ..cfg.hyper
    }
}

pub fn cmd_train(cfg: &ExperimentConfig) -> Result<()> {
    let (vocab, corpus) = load_vocab_and_corpus(cfg)?;
    let hyper = resolved_hyper(cfg, &vocab);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (_, transcript, losses) = run_training(
        &corpus,
        &hyper,
        &cfg.train,
        &cfg.defense,
        cfg.capture_every,
        &mut rng,
    )?;

    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join("config.resolved.txt"), cfg.echo())?;
    vocab.save(&cfg.out.join("vocab.txt"))?;
    transcript.save(&cfg.out.join("transcript"))?;

    let mut csv = String::from("iteration,loss\n");
    for (t, loss) in &losses {
        let _ = writeln!(csv, "{t},{loss}");
    }
    fs::write(cfg.out.join("loss.csv"), csv)?;

    println!(
        "trained {} iterations, captured {} transcript entries -> {}",
        cfg.train.iterations,
        transcript.entries.len(),
        cfg.out.display()
    );
    Ok(())
}

fn extraction_mode(defense: &DefenseConfig, hidden_dim: usize) -> ExtractionMode {
    match *defense {
        DefenseConfig::Dpsgd { noise, .. } if noise > 0.0 => {
            ExtractionMode::Threshold(noise * (2.0 * (hidden_dim as f64).ln()).sqrt())
        }
        _ => ExtractionMode::Exact,
    }
}

/// One attacked transcript entry: raw attack output plus its scores.
pub struct EntryOutcome {
    pub results: Vec<AttackResult>,
    pub report: MetricsReport,
}

fn scheduled_entries<'a>(
    transcript: &'a Transcript,
    schedule: &Schedule,
) -> Result<Vec<&'a TranscriptEntry>> {
    match schedule {
        Schedule::All => Ok(transcript.entries.iter().collect()),
        Schedule::Iterations(list) => list
            .iter()
            .map(|&it| {
                transcript
                    .entries
                    .iter()
                    .find(|e| e.iteration == it)
                    .ok_or_else(|| {
                        Error::InvalidConfig(format!("transcript has no entry at iteration {it}"))
                    })
            })
            .collect(),
    }
}

/// Scores accepted recoveries against the entry's hidden batch.
fn score_entry(
    entry: &TranscriptEntry,
    vocab: &Vocab,
    defense: &DefenseConfig,
    accepted: &[Vec<TokenId>],
    repetitions: usize,
) -> Result<MetricsReport> {
    let truth = &entry.eval_ground_truth().member_sentences;
    let truth_seqs: Vec<Vec<TokenId>> = truth.iter().map(|s| s.token_ids.clone()).collect();

    // Token-set scores come from the bag extraction alone. The reference set
    // includes bos, which genuinely occurs in every batch row.
    let mode = extraction_mode(defense, entry.params.hyper.hidden_dim);
    let bag = match mode {
        ExtractionMode::Exact => extract_bag_of_words(&entry.transmitted.w_embed, mode),
        ExtractionMode::Threshold(_) => {
            let DefenseConfig::Dpsgd { noise, .. } = defense else {
                unreachable!("threshold mode implies dpsgd")
            };
            dpsgd_bow_attack(
                &entry.transmitted.w_embed,
                *noise,
                entry.params.hyper.hidden_dim,
            )?
        }
    };
    let mut truth_set: BTreeSet<TokenId> = entry.eval_ground_truth().token_set();
    truth_set.insert(BOS_ID);
    let set_scores = token_set_scores(&bag.token_ids, &truth_set)?;

    // ROUGE: each ground-truth sentence is scored against its best recovery.
    let mut per_sentence = Vec::with_capacity(truth.len());
    let (mut r1, mut r2, mut rl) = (0.0, 0.0, 0.0);
    for t in truth.iter() {
        let mut best = (0.0, 0.0, 0.0, usize::MAX);
        for (i, rec) in accepted.iter().enumerate() {
            let s = rouge_scores(rec, &t.token_ids);
            if best.3 == usize::MAX || s.rouge_l_f > best.2 {
                best = (s.rouge1_f, s.rouge2_f, s.rouge_l_f, i);
            }
        }
        let recovered_text = if best.3 == usize::MAX {
            String::new()
        } else {
            detokenize(&accepted[best.3], vocab)
        };
        per_sentence.push(SentenceReport {
            reference_text: if t.raw_text.is_empty() {
                detokenize(&t.token_ids, vocab)
            } else {
                t.raw_text.clone()
            },
            recovered_text,
            rouge1: best.0,
            rouge2: best.1,
            rouge_l: best.2,
        });
        r1 += best.0;
        r2 += best.1;
        rl += best.2;
    }
    let n = truth.len() as f64;

    // NERR over the annotated subset, if any.
    let with_entities: Vec<&Sentence> = truth.iter().filter(|s| !s.entity_spans.is_empty()).collect();
    let nerr_value = if with_entities.is_empty() {
        None
    } else {
        let mut total = 0.0;
        for s in &with_entities {
            total += nerr(accepted, s)?;
        }
        Some(total / with_entities.len() as f64)
    };

    let multi = {
        let (recall, precision) = if accepted.is_empty() {
            (0.0, 0.0)
        } else {
            multi_sentence_scores(accepted, &truth_seqs, MULTI_THRESHOLD)?
        };
        Some(MultiReport {
            recall,
            precision,
            r: repetitions,
        })
    };

    Ok(MetricsReport {
        batch_size: truth.len(),
        iteration: entry.iteration,
        rouge1: r1 / n,
        rouge2: r2 / n,
        rouge_l: rl / n,
        nerr: nerr_value,
        precision: set_scores.precision,
        recall: set_scores.recall,
        multi,
        per_sentence,
    })
}

/// Attacks every scheduled entry of a transcript. A defense that empties the
/// bag of words is a reported outcome (zero scores), not an error.
pub fn attack_transcript(
    transcript: &Transcript,
    vocab: &Vocab,
    beam: &BeamSearchConfig,
    reorder: &ReorderConfig,
    schedule: &Schedule,
    repetitions: usize,
    ban_order: usize,
) -> Result<Vec<EntryOutcome>> {
    let entries = scheduled_entries(transcript, schedule)?;
    let mut outcomes = Vec::with_capacity(entries.len());
    for entry in entries {
        let mode = extraction_mode(&transcript.defense, transcript.hyper.hidden_dim);
        let attempt = recover_multiple(entry, vocab, mode, beam, reorder, repetitions, ban_order);
        let results = match attempt {
            Ok(r) => r,
            Err(Error::EmptyBag) | Err(Error::EmptyPrompts) => Vec::new(),
            Err(e) => return Err(e),
        };
        let accepted: Vec<Vec<TokenId>> = results
            .iter()
            .map(|r| r.best().token_ids.clone())
            .collect();
        let report = score_entry(entry, vocab, &transcript.defense, &accepted, repetitions)?;
        outcomes.push(EntryOutcome { results, report });
    }
    Ok(outcomes)
}

#[derive(Debug, Serialize, Deserialize)]
struct ResultLine {
    iteration: usize,
    rep: usize,
    rank: usize,
    tokens: Vec<TokenId>,
    text: String,
    prior_score: f64,
    beam_score: f64,
    configs: ConfigsEcho,
}

#[derive(Debug, Serialize, Deserialize)]
struct ConfigsEcho {
    beam: BeamSearchConfig,
    reorder: ReorderConfig,
}

fn write_results_jsonl(
    path: &Path,
    outcomes: &[EntryOutcome],
    vocab: &Vocab,
    beam: &BeamSearchConfig,
    reorder: &ReorderConfig,
) -> Result<()> {
    let mut out = String::new();
    for outcome in outcomes {
        for (rep, result) in outcome.results.iter().enumerate() {
            for rec in &result.recovered {
                let line = ResultLine {
                    iteration: result.iteration,
                    rep,
                    rank: rec.rank,
                    tokens: rec.token_ids.clone(),
                    text: detokenize(&rec.token_ids, vocab),
                    prior_score: rec.prior_score,
                    beam_score: rec.beam_score,
                    configs: ConfigsEcho {
                        beam: beam.clone(),
                        reorder: *reorder,
                    },
                };
                out.push_str(&serde_json::to_string(&line)?);
                out.push('\n');
            }
        }
    }
    fs::write(path, out)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct MeanStd {
    mean: f64,
    std: f64,
}

fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len() as f64;
    if values.is_empty() {
        return MeanStd { mean: 0.0, std: 0.0 };
    }
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    MeanStd { mean, std }
}

#[derive(Debug, Serialize)]
struct MetricsFile {
    aggregate: Aggregate,
    entries: Vec<MetricsReport>,
}

#[derive(Debug, Serialize)]
struct Aggregate {
    n_entries: usize,
    rouge1: MeanStd,
    rouge2: MeanStd,
    #[serde(rename = "rougeL")]
    rouge_l: MeanStd,
    #[serde(skip_serializing_if = "Option::is_none")]
    nerr: Option<MeanStd>,
    precision: MeanStd,
    recall: MeanStd,
}

fn aggregate(reports: &[MetricsReport]) -> Aggregate {
    let collect = |f: &dyn Fn(&MetricsReport) -> f64| -> Vec<f64> {
        reports.iter().map(f).collect()
    };
    let nerr_values: Vec<f64> = reports.iter().filter_map(|r| r.nerr).collect();
    Aggregate {
        n_entries: reports.len(),
        rouge1: mean_std(&collect(&|r| r.rouge1)),
        rouge2: mean_std(&collect(&|r| r.rouge2)),
        rouge_l: mean_std(&collect(&|r| r.rouge_l)),
        nerr: if nerr_values.is_empty() {
            None
        } else {
            Some(mean_std(&nerr_values))
        },
        precision: mean_std(&collect(&|r| r.precision)),
        recall: mean_std(&collect(&|r| r.recall)),
    }
}

fn write_metrics_json(path: &Path, reports: Vec<MetricsReport>) -> Result<()> {
    let file = MetricsFile {
        aggregate: aggregate(&reports),
        entries: reports,
    };
    fs::write(path, serde_json::to_string_pretty(&file)? + "\n")?;
    Ok(())
}

pub fn cmd_attack(cfg: &ExperimentConfig) -> Result<()> {
    let transcript_dir = cfg.out.join("transcript");
    if !transcript_dir.join("manifest.json").exists() {
        return Err(Error::InvalidConfig(format!(
            "no transcript at {} (run `film train` first)",
            transcript_dir.display()
        )));
    }
    let vocab = Vocab::load(&cfg.out.join("vocab.txt"))?;
    let transcript = Transcript::load(&transcript_dir)?;
    let outcomes = attack_transcript(
        &transcript,
        &vocab,
        &cfg.beam,
        &cfg.reorder,
        &cfg.schedule,
        cfg.repetitions,
        cfg.ban_order,
    )?;

    fs::write(cfg.out.join("config.resolved.txt"), cfg.echo())?;
    write_results_jsonl(
        &cfg.out.join("results.jsonl"),
        &outcomes,
        &vocab,
        &cfg.beam,
        &cfg.reorder,
    )?;
    let reports: Vec<MetricsReport> = outcomes.into_iter().map(|o| o.report).collect();
    write_metrics_json(&cfg.out.join("metrics.json"), reports)?;
    println!("attack results -> {}", cfg.out.display());
    Ok(())
}

/// Re-scores an existing `results.jsonl` against the transcript's ground
/// truth (for metric changes without re-running the attack).
pub fn cmd_metrics(cfg: &ExperimentConfig) -> Result<()> {
    let results_path = cfg.out.join("results.jsonl");
    if !results_path.exists() {
        return Err(Error::InvalidConfig(format!(
            "no results at {} (run `film attack` first)",
            results_path.display()
        )));
    }
    let vocab = Vocab::load(&cfg.out.join("vocab.txt"))?;
    let transcript = Transcript::load(&cfg.out.join("transcript"))?;
    let text = fs::read_to_string(&results_path)?;
    let mut lines = Vec::new();
    for l in text.lines() {
        let line: ResultLine = serde_json::from_str(l)?;
        lines.push(line);
    }

    let mut reports = Vec::new();
    for entry in &transcript.entries {
        let accepted: Vec<Vec<TokenId>> = lines
            .iter()
            .filter(|l| l.iteration == entry.iteration && l.rank == 0)
            .map(|l| l.tokens.clone())
            .collect();
        if accepted.is_empty() && !lines.iter().any(|l| l.iteration == entry.iteration) {
            // Entry was not attacked at all unless the defense emptied the
            // bag, in which case results.jsonl legitimately has no lines.
            match &transcript.defense {
                DefenseConfig::FreezeEmbeddings => {}
                _ => continue,
            }
        }
        let reps = accepted.len().max(1);
        reports.push(score_entry(
            entry,
            &vocab,
            &transcript.defense,
            &accepted,
            reps,
        )?);
    }
    write_metrics_json(&cfg.out.join("metrics.json"), reports)?;
    println!("re-scored metrics -> {}", cfg.out.display());
    Ok(())
}

fn apply_axis(cfg: &ExperimentConfig, axis: &str, value: f64) -> Result<ExperimentConfig> {
    let mut c = cfg.clone();
    match axis {
        "batch_size" => c.train.batch_size = value as usize,
        "iteration" => c.schedule = Schedule::Iterations(vec![value as usize]),
        "beam_size" => c.beam.beam_size = value as usize,
        "ngram" => c.beam.ngram_order = value as usize,
        "beta" => c.reorder.beta = value,
        "prune_ratio" => c.defense = DefenseConfig::Prune { ratio: value },
        "sigma" => {
            let clip = match c.defense {
                DefenseConfig::Dpsgd { clip, .. } => clip,
                _ => 1.0,
            };
            c.defense = DefenseConfig::Dpsgd { clip, noise: value };
        }
        other => {
            return Err(Error::InvalidConfig(format!(
                "unknown sweep axis `{other}` (expected batch_size|iteration|beam_size|ngram|beta|prune_ratio|sigma)"
            )))
        }
    }
    c.defense.validate()?;
    c.beam.validate()?;
    c.reorder.validate()?;
    Ok(c)
}

fn csv_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Re-runs the train+attack pipeline varying one axis, holding the seed
/// fixed, and writes one CSV row of aggregate metrics per axis value.
pub fn cmd_sweep(cfg: &ExperimentConfig, axis: &str) -> Result<()> {
    if cfg.sweep_values.is_empty() {
        return Err(Error::InvalidConfig(
            "sweep requires `sweep.values` in the config".into(),
        ));
    }
    // Fail fast on a bad axis before any training happens.
    apply_axis(cfg, axis, cfg.sweep_values[0])?;

    let mut csv = String::from("axis_value,rouge1,rouge2,rougeL,nerr,precision,recall\n");
    for &value in &cfg.sweep_values {
        let c = apply_axis(cfg, axis, value)?;
        let (vocab, corpus) = load_vocab_and_corpus(&c)?;
        let hyper = resolved_hyper(&c, &vocab);
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        let (_, transcript, _) = run_training(
            &corpus,
            &hyper,
            &c.train,
            &c.defense,
            c.capture_every,
            &mut rng,
        )?;
        let outcomes = attack_transcript(
            &transcript,
            &vocab,
            &c.beam,
            &c.reorder,
            &c.schedule,
            c.repetitions,
            c.ban_order,
        )?;
        let reports: Vec<MetricsReport> = outcomes.into_iter().map(|o| o.report).collect();
        let agg = aggregate(&reports);
        let _ = writeln!(
            csv,
            "{value},{},{},{},{},{},{}",
            agg.rouge1.mean,
            agg.rouge2.mean,
            agg.rouge_l.mean,
            csv_opt(agg.nerr.map(|m| m.mean)),
            agg.precision.mean,
            agg.recall.mean
        );
    }
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join("config.resolved.txt"), cfg.echo())?;
    let path = cfg.out.join(format!("sweep_{axis}.csv"));
    fs::write(&path, csv)?;
    println!("sweep results -> {}", path.display());
    Ok(())
}
