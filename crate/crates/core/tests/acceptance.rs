//! Acceptance criteria, one PASS/FAIL line each. Run with
//! `cargo test -p evolve-core --test acceptance`.

mod common;

use std::collections::BTreeSet;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use evolve_core::backend::{whitespace_tokens, MockBackend};
use evolve_core::config::RunConfig;
use evolve_core::evaluation::{corpus_bleu, BleuConfig, Smoothing, Tokenization};
use evolve_core::evaluation::{EvaluationConfig, Evaluator};
use evolve_core::generation::{IterationDataset, PromptSet};
use evolve_core::pipeline::{self, Phase, Pipeline, RunManifest, RunStatus};
use evolve_core::scoring::{IfdScorer, ScoreRecord, ScoringConfig};
use evolve_core::selection::{select, Candidate, SelectionConfig, Strategy};
use evolve_core::trainer::read_training_set;
use evolve_core::{KnowledgeDocument, ModelRef, ModelRole, QAPair};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;
type Criterion = (&'static str, Option<Duration>, fn() -> Check);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let holds: bool = $cond;
        if !holds {
            return Err(format!($($msg)+));
        }
    };
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("IFD arithmetic", Some(Duration::from_secs(1)), ifd_arithmetic),
        ("IFD identity", None, ifd_identity),
        ("Selection oracle", Some(Duration::from_secs(5)), selection_oracle),
        ("BLEU oracle", Some(Duration::from_secs(5)), bleu_oracle),
        ("Relative score law", None, relative_score_law),
        ("End-to-end mock run", Some(Duration::from_secs(10)), end_to_end),
        ("Ablation semantics", Some(Duration::from_secs(10)), ablations),
        ("Resume determinism", Some(Duration::from_secs(60)), resume_determinism),
        ("Prompt fidelity", None, prompt_fidelity),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, limit, check) in criteria {
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check))
            .unwrap_or_else(|p| {
                let msg = p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panic".into());
                Err(format!("panicked: {msg}"))
            });
        let elapsed = start.elapsed();
        let timing = match limit {
            Some(l) => format!("{:.3}s, limit {}s", elapsed.as_secs_f64(), l.as_secs()),
            None => format!("{:.3}s", elapsed.as_secs_f64()),
        };
        let outcome = match (outcome, limit) {
            (Ok(_), Some(l)) if elapsed > l => Err("over the time limit".to_string()),
            (o, _) => o,
        };
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail} ({timing})"),
            Err(reason) => {
                failed += 1;
                println!("FAIL {name}: {reason} ({timing})");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn scorer() -> ModelRef {
    ModelRef::new("mock://", "ifd-scorer", ModelRole::Scorer)
}

fn pair(id: &str, question: &str, answer: &str) -> QAPair {
    QAPair {
        id: id.into(),
        iteration: 0,
        doc_id: id.into(),
        question: question.into(),
        answer: answer.into(),
    }
}

/// Mean NLL summed back to front, so the oracle does not share the library's order.
fn nll(lp: &[f64]) -> f64 {
    let mut total = 0.0;
    for x in lp.iter().rev() {
        total -= x;
    }
    total / lp.len() as f64
}

fn score_scripted(question: &str, answer: &str, cond: &[f64], direct: &[f64]) -> ScoreRecord {
    let config = ScoringConfig::default();
    let mock = MockBackend::new()
        .with_logprobs(config.conditioned_context(question), answer, cond.to_vec())
        .with_logprobs(config.direct_frame.clone(), answer, direct.to_vec());
    IfdScorer {
        backend: &mock,
        scorer: &scorer(),
        config: &config,
        max_parallel: 2,
    }
    .score_pair(&pair("p", question, answer))
    .expect("scripted pair scores")
}

fn ifd_arithmetic() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for case in 0..1000 {
        let n = rng.random_range(1..=40);
        let answer: Vec<String> = (0..n).map(|i| format!("w{i}")).collect();
        let answer = answer.join(" ");
        ensure!(whitespace_tokens(&answer).len() == n, "tokenizer disagrees");
        let cond: Vec<f64> = (0..n).map(|_| -rng.random_range(0.001..8.0)).collect();
        let direct: Vec<f64> = (0..n).map(|_| -rng.random_range(0.001..8.0)).collect();
        let question = format!("question {case}?");
        let r = score_scripted(&question, &answer, &cond, &direct);
        let (c, d) = (nll(&cond), nll(&direct));
        for (got, want) in [(r.conditioned_score, c), (r.direct_score, d), (r.ifd, c / d)] {
            let err = (got - want).abs();
            worst = worst.max(err);
            ensure!(err <= 1e-12, "case {case}: {got} vs {want}");
        }
        ensure!(r.token_count == n, "case {case}: token count {}", r.token_count);
        for scale in [0.5, 2.0, 10.0] {
            let sc: Vec<f64> = cond.iter().map(|x| x * scale).collect();
            let sd: Vec<f64> = direct.iter().map(|x| x * scale).collect();
            let s = score_scripted(&question, &answer, &sc, &sd);
            ensure!(
                (s.ifd - r.ifd).abs() <= 1e-12 * r.ifd.max(1.0),
                "case {case}: scaling by {scale} moved IFD {} -> {}",
                r.ifd,
                s.ifd
            );
        }
    }
    Ok(format!("1000 pairs, max abs error {worst:.1e}, scale-invariant under 0.5/2/10"))
}

fn ifd_identity() -> Check {
    let lp = [-0.25, -1.5, -3.0, -0.125, -2.75];
    let r = score_scripted("Why?", "a b c d e", &lp, &lp);
    ensure!(r.ifd == 1.0, "IFD was {}", r.ifd);
    Ok("IFD = 1.0 exactly".into())
}

fn selection_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut total = 0usize;
    for pool_no in 0..500 {
        // Log-uniform sizes, pinned at both ends of 1..=10^4.
        let size = match pool_no {
            0 => 1,
            1 => 10_000,
            _ => 10f64.powf(rng.random_range(0.0..4.0)).round().max(1.0) as usize,
        };
        total += size;
        let shared = [0.5, 1.0, 1.25];
        let pairs: Vec<QAPair> = (0..size)
            .map(|n| QAPair {
                id: format!("q{n:05}"),
                iteration: rng.random_range(0..6),
                doc_id: String::new(),
                question: String::new(),
                answer: String::new(),
            })
            .collect();
        let scores: Vec<ScoreRecord> = pairs
            .iter()
            .map(|p| {
                let ifd = if rng.random_bool(0.3) {
                    shared[rng.random_range(0..shared.len())]
                } else {
                    rng.random_range(0.05..2.0)
                };
                ScoreRecord {
                    qa_id: p.id.clone(),
                    conditioned_score: ifd,
                    direct_score: 1.0,
                    ifd,
                    token_count: 1,
                }
            })
            .collect();
        let k = rng.random_range(0..=size + 2);
        let config = SelectionConfig {
            strategy: Strategy::IfdTopk,
            k: Some(k),
            seed: 0,
        };

        // Oracle: an ordered set keyed by (descending IFD, iteration, id).
        let oracle: BTreeSet<(std::cmp::Reverse<u64>, u32, &str)> = pairs
            .iter()
            .zip(&scores)
            .map(|(p, s)| (std::cmp::Reverse(s.ifd.to_bits()), p.iteration, p.id.as_str()))
            .collect();
        let expected: Vec<&str> = oracle.iter().take(k).map(|e| e.2).collect();

        let mut candidates: Vec<Candidate<'_>> = pairs
            .iter()
            .zip(&scores)
            .map(|(pair, score)| Candidate {
                pair,
                score: Some(score),
            })
            .collect();
        let got = select(0, &candidates, &config, 0).map_err(|e| e.to_string())?;
        ensure!(
            got.selected_ids == expected,
            "pool {pool_no} (size {size}, k {k}) disagrees with the oracle"
        );
        candidates.shuffle(&mut rng);
        let shuffled = select(0, &candidates, &config, 0).map_err(|e| e.to_string())?;
        ensure!(
            shuffled.selected_ids == got.selected_ids,
            "pool {pool_no} is not permutation invariant"
        );
    }
    Ok(format!("500 pools, {total} candidates, permutation invariant"))
}

/// Unsmoothed corpus BLEU over character tokens, counted by brute force.
fn oracle_bleu(cands: &[String], refs: &[String], max_n: usize) -> f64 {
    let chars = |s: &str| -> Vec<char> { s.chars().filter(|c| !c.is_whitespace()).collect() };
    let count = |seq: &[char], gram: &[char]| seq.windows(gram.len()).filter(|w| *w == gram).count();
    let (mut c_len, mut r_len) = (0usize, 0usize);
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    for (c, r) in cands.iter().zip(refs) {
        let (c, r) = (chars(c), chars(r));
        c_len += c.len();
        r_len += r.len();
        for n in 1..=max_n {
            if c.len() < n {
                continue;
            }
            totals[n - 1] += c.len() - n + 1;
            let mut seen: Vec<&[char]> = Vec::new();
            for gram in c.windows(n) {
                if seen.contains(&gram) {
                    continue;
                }
                seen.push(gram);
                matches[n - 1] += count(&c, gram).min(count(&r, gram));
            }
        }
    }
    if c_len == 0 {
        return if r_len == 0 { 1.0 } else { 0.0 };
    }
    let mut log_sum = 0.0;
    let mut orders = 0;
    for n in 0..max_n {
        if totals[n] == 0 {
            continue;
        }
        if matches[n] == 0 {
            return 0.0;
        }
        log_sum += (matches[n] as f64 / totals[n] as f64).ln();
        orders += 1;
    }
    let bp = if c_len < r_len {
        (1.0 - r_len as f64 / c_len as f64).exp()
    } else {
        1.0
    };
    bp * (log_sum / orders as f64).exp()
}

fn bleu_oracle() -> Check {
    let config = BleuConfig {
        max_ngram: 4,
        tokenization: Tokenization::Character,
        smoothing: Smoothing::None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let alphabet = ['a', 'b', 'c', 'd', 'e'];
    let sentence = |rng: &mut ChaCha8Rng| -> String {
        let len = rng.random_range(0..=20);
        (0..len).map(|_| alphabet[rng.random_range(0..5)]).collect()
    };
    let mut worst: f64 = 0.0;
    let mut nonzero = 0;
    for corpus in 0..200 {
        let size = rng.random_range(1..=6);
        let cands: Vec<String> = (0..size).map(|_| sentence(&mut rng)).collect();
        // Half the corpora use near-copies so higher-order matches occur.
        let refs: Vec<String> = if corpus % 2 == 0 {
            (0..size).map(|_| sentence(&mut rng)).collect()
        } else {
            cands
                .iter()
                .map(|c| {
                    c.chars()
                        .map(|ch| if rng.random_bool(0.15) { alphabet[rng.random_range(0..5)] } else { ch })
                        .collect()
                })
                .collect()
        };
        let got: f64 = corpus_bleu(&cands, &refs, &config).map_err(|e| e.to_string())?;
        let want = oracle_bleu(&cands, &refs, 4);
        worst = worst.max((got - want).abs());
        ensure!((got - want).abs() <= 1e-9, "corpus {corpus}: {got} vs oracle {want}");
        if want > 0.0 {
            nonzero += 1;
        }
    }
    let refs = vec!["abcdeabc".to_string(), "edcba".to_string()];
    let identity: f64 = corpus_bleu(&refs, &refs, &config).map_err(|e| e.to_string())?;
    ensure!((identity - 1.0).abs() <= 1e-12, "identity scored {identity}");
    let disjoint = vec!["xyzxy".to_string(), "zzyx".to_string()];
    let zero: f64 = corpus_bleu(&disjoint, &refs, &config).map_err(|e| e.to_string())?;
    ensure!(zero == 0.0, "disjoint scored {zero}");
    Ok(format!(
        "200 corpora ({nonzero} nonzero), max abs error {worst:.1e}, identity 1, disjoint 0"
    ))
}

fn relative_score_law() -> Check {
    let eval = common::eval_pairs(12);
    let mock = MockBackend::new();
    let config = EvaluationConfig::default();
    let evaluator = Evaluator {
        backend: &mock,
        config: &config,
        max_parallel: 4,
    };
    let model = ModelRef::new("mock://", "benchmark", ModelRole::Evaluatee);
    let (baseline, _) = evaluator.measure(&model, &eval).map_err(|e| e.to_string())?;
    let report = evaluator
        .evaluate_model(&model, &eval, baseline, 0)
        .map_err(|e| e.to_string())?;
    ensure!(
        (report.relative_score - 1.0).abs() <= 1e-12,
        "relative score {}",
        report.relative_score
    );
    Ok(format!("baseline BLEU {baseline:.4}, relative score {}", report.relative_score))
}

fn sizes(dir: &Path, m: &RunManifest) -> (Vec<usize>, Vec<usize>) {
    let mut d = Vec::new();
    let mut t = Vec::new();
    for r in &m.iterations {
        let g = r.generate.as_ref().expect("generated");
        d.push(IterationDataset::read_pairs(&dir.join(&g.dataset.path)).unwrap().len());
        let tr = r.train.as_ref().expect("trained");
        t.push(read_training_set(&dir.join(&tr.training_set.path)).unwrap().len());
    }
    (d, t)
}

fn bytes(m: &RunManifest) -> Vec<u8> {
    serde_json::to_vec_pretty(&m.comparable()).unwrap()
}

fn e2e_config(root: &Path, strategy: Strategy) -> RunConfig {
    let mut config = common::mock_config(root, 5, 3, Some(2));
    config.selection.strategy = strategy;
    config
}

fn end_to_end() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = e2e_config(tmp.path(), Strategy::IfdTopk);
    let dir_a = tmp.path().join("a");
    let a = pipeline::run(&dir_a, config.clone(), None).map_err(|e| e.to_string())?;
    let b = pipeline::run(&tmp.path().join("b"), config, None).map_err(|e| e.to_string())?;
    ensure!(a.status == RunStatus::Completed, "status {:?}", a.status);
    ensure!(a.iterations.len() == 3, "{} iterations", a.iterations.len());

    let (d, t) = sizes(&dir_a, &a);
    for i in 0..3 {
        let want = d[i] + d[..i].iter().sum::<usize>().min(2);
        ensure!(t[i] == want, "iteration {i}: training set {} != {want}", t[i]);
    }

    let mut seqs = vec![a.baseline.as_ref().unwrap().marker.seq];
    for r in &a.iterations {
        for phase in Phase::ITERATION {
            seqs.push(r.marker(phase).ok_or(format!("missing {phase}"))?.seq);
        }
    }
    ensure!(seqs.windows(2).all(|w| w[0] < w[1]), "phase markers out of order: {seqs:?}");
    ensure!(bytes(&a) == bytes(&b), "seeded manifests differ");
    Ok(format!("|D_i| = {d:?}, training sizes {t:?}, manifests identical"))
}

fn ablations() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut report = Vec::new();
    for strategy in [Strategy::NoHistory, Strategy::AllHistory, Strategy::RandomK] {
        let config = e2e_config(tmp.path(), strategy);
        let name = format!("{strategy:?}");
        let dir = tmp.path().join(&name);
        let m = pipeline::run(&dir, config.clone(), None).map_err(|e| e.to_string())?;
        let (d, t) = sizes(&dir, &m);
        for i in 0..d.len() {
            let history: usize = d[..i].iter().sum();
            let want = match strategy {
                Strategy::NoHistory => d[i],
                Strategy::AllHistory => d[i] + history,
                Strategy::RandomK => d[i] + history.min(2),
                Strategy::IfdTopk => unreachable!(),
            };
            ensure!(t[i] == want, "{name} iteration {i}: {} != {want}", t[i]);
        }
        if strategy == Strategy::RandomK {
            let again = pipeline::run(&tmp.path().join("again"), config, None)
                .map_err(|e| e.to_string())?;
            let picks = |m: &RunManifest| -> Vec<Vec<String>> {
                m.iterations
                    .iter()
                    .map(|r| r.select.as_ref().unwrap().result.selected_ids.clone())
                    .collect()
            };
            ensure!(picks(&m) == picks(&again), "random_k selections differ across seeded runs");
        }
        report.push(format!("{name} {t:?}"));
    }
    Ok(format!("{}; random_k reproducible", report.join(", ")))
}

fn resume_determinism() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = e2e_config(tmp.path(), Strategy::IfdTopk);
    let reference = pipeline::run(&tmp.path().join("ref"), config.clone(), None)
        .map_err(|e| e.to_string())?;
    let want = bytes(&reference);
    let boundaries = reference.next_seq as usize;
    let mut resumed = 0;
    for cut in 1..boundaries {
        for torn in [false, true] {
            let dir = tmp.path().join(format!("cut-{cut}-{torn}"));
            let mut p = Pipeline::create(&dir, config.clone(), None).map_err(|e| e.to_string())?;
            p.run_phases(Some(cut)).map_err(|e| e.to_string())?;
            let next = p.next_phase();
            drop(p);
            if torn {
                // A kill mid-phase leaves partial output the manifest never recorded.
                let file = next.and_then(|n| {
                    let name = match n.phase {
                        Phase::Generate => "dataset.jsonl",
                        Phase::Score => "scores.jsonl",
                        Phase::Train => "train.jsonl",
                        Phase::Evaluate => "eval.json",
                        Phase::Baseline | Phase::Select => return None,
                    };
                    Some(format!("iter-{:03}/{name}", n.iteration?))
                });
                if let Some(file) = file {
                    let path = dir.join(file);
                    fs::create_dir_all(path.parent().unwrap()).unwrap();
                    fs::write(path, "{\"truncated").unwrap();
                }
            }
            let m = pipeline::resume(&dir, Some(&config), None).map_err(|e| e.to_string())?;
            ensure!(
                bytes(&m) == want,
                "resume after phase {cut} (torn: {torn}) diverged"
            );
            resumed += 1;
        }
    }
    Ok(format!("{resumed} interrupted runs over {} phase boundaries match", boundaries - 1))
}

fn prompt_fidelity() -> Check {
    let prompts = PromptSet::default();
    let doc = KnowledgeDocument::new("d", "Fan failure alarms clear after reseating the tray.");
    let question = prompts.build_question_prompt(&doc).map_err(|e| e.to_string())?;
    let question = &question.messages[0].content;
    let answer = prompts
        .build_answer_prompt(&doc, "How do I clear a fan alarm?")
        .map_err(|e| e.to_string())?;
    let answer = &answer.messages[0].content;

    let question_lines = [
        "Note 1: The question should be as concise as possible.",
        "Note 2: The question should not contain multiple sub-questions, only one question is permitted.",
        "Note 6: Do not output declarative sentences; it must be a question!",
    ];
    let answer_lines = [
        "1. Receive and parse the user's question.",
        "2. Read and analyze the document provided by the user.",
        "Knowledge fragment: The solar system consists of eight planets, with Jupiter being the largest.",
        "Answer: The largest planet in the solar system is Jupiter.",
        "Your response must ensure two points: conciseness and accuracy.",
    ];
    for line in question_lines {
        ensure!(question.contains(line), "question prompt lacks {line:?}");
    }
    for line in answer_lines {
        ensure!(answer.contains(line), "answer prompt lacks {line:?}");
    }
    ensure!(question.contains(&doc.text), "question prompt lacks the document");
    ensure!(
        answer.contains("How do I clear a fan alarm?") && answer.contains(&doc.text),
        "answer prompt lacks its fills"
    );
    Ok(format!(
        "{} rule lines present in rendered prompts",
        question_lines.len() + answer_lines.len()
    ))
}
