mod common;

use std::collections::HashSet;
use std::io::Write;

use specdistill::datasets::{
    batchify, export_jsonl, gen_arithmetic, gen_template, load_jsonl, ArithmeticSpec, Dataset,
    Example, Split, Tokenizer, CHAR_ALPHABET, EOS, IGNORE, PAD,
};
use specdistill::distill::{finetune, Objective, TrainConfig};
use specdistill::specdec::generate_greedy;
use specdistill::tinylm::{LMConfig, Role, TinyLM};
use specdistill::Error;

fn arithmetic(seed: u64, n: usize, split: Split) -> Dataset {
    gen_arithmetic(
        seed,
        n,
        ArithmeticSpec::default(),
        split,
        &Tokenizer::char_default(),
    )
    .unwrap()
}

/// Evaluates a prompt such as `12+7*2:` strictly left to right and renders
/// the chain the completion should spell out.
fn expected_completion(prompt: &str) -> String {
    let body = prompt.strip_suffix(':').expect("prompt ends with ':'");
    let mut numbers = Vec::new();
    let mut ops = Vec::new();
    let mut cur = String::new();
    for ch in body.chars() {
        if ch.is_ascii_digit() {
            cur.push(ch);
        } else {
            numbers.push(cur.parse::<i64>().unwrap());
            cur.clear();
            ops.push(ch);
        }
    }
    numbers.push(cur.parse::<i64>().unwrap());
    let mut acc = numbers[0];
    let mut out = String::new();
    for (op, &rhs) in ops.iter().zip(&numbers[1..]) {
        let next = match op {
            '+' => acc + rhs,
            '-' => acc - rhs,
            '*' => acc * rhs,
            other => panic!("unexpected operator {other}"),
        };
        assert!((0..=999).contains(&next));
        out.push_str(&format!("{acc}{op}{rhs} is {next}, "));
        acc = next;
    }
    out.push_str(&format!("so {acc}"));
    out
}

#[test]
fn generation_is_a_pure_function_of_the_seed() {
    assert_eq!(
        arithmetic(3, 50, Split::Train),
        arithmetic(3, 50, Split::Train)
    );
    assert_ne!(
        arithmetic(3, 50, Split::Train),
        arithmetic(4, 50, Split::Train)
    );
    let t = Tokenizer::char_default();
    assert_eq!(
        gen_template(1, 30, Split::Test, &t).unwrap(),
        gen_template(1, 30, Split::Test, &t).unwrap()
    );
}

#[test]
fn every_arithmetic_chain_re_evaluates() {
    let t = Tokenizer::char_default();
    for spec in [
        ArithmeticSpec::default(),
        ArithmeticSpec {
            digits: 3,
            steps: 4,
        },
        ArithmeticSpec {
            digits: 1,
            steps: 1,
        },
    ] {
        let ds = gen_arithmetic(9, 2000, spec, Split::Train, &t).unwrap();
        let mut violations = 0;
        for ex in &ds.examples {
            assert_eq!(ex.completion.last(), Some(&EOS));
            let prompt = t.decode(&ex.prompt);
            let completion = t.decode_text(&ex.completion);
            violations += usize::from(completion != expected_completion(&prompt));
        }
        assert_eq!(violations, 0, "{spec:?}");
    }
}

#[test]
fn emitted_text_stays_inside_the_vocabulary() {
    let t = Tokenizer::char_default();
    let alphabet: HashSet<char> = CHAR_ALPHABET.chars().collect();
    let ds = arithmetic(0, 500, Split::Train);
    let templ = gen_template(0, 500, Split::Train, &t).unwrap();
    for ex in ds.examples.iter().chain(&templ.examples) {
        for &id in ex
            .prompt
            .iter()
            .chain(&ex.completion[..ex.completion.len() - 1])
        {
            let sym = t.symbol(id).unwrap();
            assert!(sym.chars().all(|c| alphabet.contains(&c)), "{sym:?}");
        }
    }
    assert_ne!(PAD, EOS);
}

#[test]
fn tokenizer_round_trips_in_vocabulary_text() {
    let t = Tokenizer::char_default();
    let text = "12+7=19;19*2=38;A=38 abc|cab>";
    assert_eq!(t.decode(&t.encode(text).unwrap()), text);
    assert!(matches!(t.encode("12#"), Err(Error::OutOfVocab(_))));

    let w = Tokenizer::fit_words(["the cat sat", "a dog"]);
    assert_eq!(
        w.decode_text(&w.encode("the dog sat").unwrap()),
        "the dog sat"
    );
    assert!(matches!(w.encode("the bird"), Err(Error::OutOfVocab(_))));
}

#[test]
fn copy_task_completion_repeats_the_word() {
    let t = Tokenizer::char_default();
    let ex = Example::from_text(&t, "abcab|", "abcab").unwrap();
    assert_eq!(t.decode_text(&ex.completion), "abcab");
    let ds = gen_template(2, 300, Split::Train, &t).unwrap();
    let copies: Vec<_> = ds
        .examples
        .iter()
        .map(|e| (t.decode(&e.prompt), t.decode_text(&e.completion)))
        .filter(|(p, _)| p.ends_with('|'))
        .collect();
    assert!(!copies.is_empty());
    for (p, c) in copies {
        assert_eq!(&p[..p.len() - 1], c);
    }
}

#[test]
fn splits_share_no_prompts() {
    let t = Tokenizer::char_default();
    for make in [
        |s| arithmetic(5, 300, s),
        |s| gen_template(5, 300, s, &Tokenizer::char_default()).unwrap(),
    ] {
        let prompts = |s| {
            make(s)
                .examples
                .into_iter()
                .map(|e| e.prompt)
                .collect::<HashSet<_>>()
        };
        let (train, val, test) = (
            prompts(Split::Train),
            prompts(Split::Val),
            prompts(Split::Test),
        );
        assert!(train.is_disjoint(&val));
        assert!(train.is_disjoint(&test));
        assert!(val.is_disjoint(&test));
    }
    let _ = t;
}

#[test]
fn jsonl_export_and_load_preserve_token_ids() {
    let dir = tempfile::tempdir().unwrap();
    let t = Tokenizer::char_default();
    let ds = arithmetic(1, 40, Split::Test);
    let path = dir.path().join("a.jsonl");
    export_jsonl(&ds, &t, &path).unwrap();
    let loaded = load_jsonl(&path, &t, 128, Split::Test).unwrap();
    assert_eq!(loaded.examples, ds.examples);
}

fn write_lines(dir: &std::path::Path, name: &str, lines: &[&str]) -> std::path::PathBuf {
    let path = dir.join(name);
    let mut f = std::fs::File::create(&path).unwrap();
    for l in lines {
        writeln!(f, "{l}").unwrap();
    }
    path
}

#[test]
fn jsonl_errors_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let t = Tokenizer::char_default();
    let path = write_lines(
        dir.path(),
        "bad.jsonl",
        &[
            r#"{"prompt":"1+1:","completion":"A=2"}"#,
            r#"{"prompt":"2+2:"}"#,
        ],
    );
    match load_jsonl(&path, &t, 64, Split::Train) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
        other => panic!("expected a parse error, got {other:?}"),
    }

    let path = write_lines(
        dir.path(),
        "long.jsonl",
        &[
            r#"{"prompt":"1+1:","completion":"A=2"}"#,
            r#"{"prompt":"1+1+1+1:","completion":"A=4"}"#,
        ],
    );
    match load_jsonl(&path, &t, 8, Split::Train) {
        Err(Error::Parse { line, msg, .. }) => {
            assert_eq!(line, 2);
            assert!(msg.contains("exceeds"), "{msg}");
        }
        other => panic!("expected an overlong error, got {other:?}"),
    }

    let w = Tokenizer::fit_words(["hello there"]);
    let path = write_lines(
        dir.path(),
        "words.jsonl",
        &[r#"{"prompt":"hello","completion":"stranger"}"#],
    );
    assert!(matches!(
        load_jsonl(&path, &w, 64, Split::Train),
        Err(Error::Parse { line: 1, .. })
    ));
}

#[test]
fn empty_jsonl_gives_an_empty_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_lines(dir.path(), "empty.jsonl", &[]);
    let ds = load_jsonl(&path, &Tokenizer::char_default(), 64, Split::Train).unwrap();
    assert!(ds.is_empty());
}

#[test]
fn single_example_supervises_exactly_its_completion() {
    let ds = arithmetic(2, 1, Split::Train);
    let seq = ds.max_len() - 1;
    let batches = batchify(&ds, 1, seq, None).unwrap();
    assert_eq!(batches.len(), 1);
    assert_eq!(
        batches[0].supervised_count(),
        ds.examples[0].completion.len()
    );
}

#[test]
fn batches_cover_every_completion_token_and_only_those() {
    let ds = arithmetic(3, 37, Split::Train);
    let seq = ds.max_len() - 1;
    let batches = batchify(&ds, 8, seq, Some(11)).unwrap();
    let total: usize = batches.iter().map(|b| b.supervised_count()).sum();
    assert_eq!(
        total,
        ds.examples
            .iter()
            .map(|e| e.completion.len())
            .sum::<usize>()
    );
    assert_eq!(total, ds.supervised_tokens());
    let mut seen = Vec::new();
    for b in &batches {
        assert_eq!(b.inputs.len(), b.batch * b.seq);
        for (r, &id) in b.example_ids.iter().enumerate() {
            seen.push(id);
            let ex = &ds.examples[id];
            let toks = ex.tokens();
            for t in 0..seq {
                let label = b.labels[r * seq + t];
                if t + 1 < ex.prompt.len() || t + 1 >= toks.len() {
                    assert_eq!(label, IGNORE, "example {id} position {t}");
                } else {
                    assert_eq!(label, toks[t + 1]);
                }
                if t >= toks.len() - 1 {
                    assert_eq!(b.inputs[r * seq + t], PAD);
                }
            }
        }
    }
    seen.sort_unstable();
    assert_eq!(seen, (0..37).collect::<Vec<_>>());
}

#[test]
fn shuffling_is_deterministic_per_epoch_seed() {
    let ds = arithmetic(4, 40, Split::Train);
    let seq = ds.max_len() - 1;
    let order = |s| -> Vec<usize> {
        batchify(&ds, 8, seq, Some(s))
            .unwrap()
            .into_iter()
            .flat_map(|b| b.example_ids)
            .collect()
    };
    assert_eq!(order(1), order(1));
    assert_ne!(order(1), order(2));
    assert!(matches!(
        batchify(&ds, 8, 4, None),
        Err(Error::ContextOverflow { .. })
    ));
    assert!(batchify(&ds, 0, seq, None).is_err());
}

#[test]
fn trained_target_masters_the_template_task() {
    let t = Tokenizer::char_default();
    let train = gen_template(0, 12_000, Split::Train, &t).unwrap();
    let test = gen_template(0, 150, Split::Test, &t).unwrap();
    let config = LMConfig {
        n_layers: 2,
        d_model: 64,
        n_heads: 4,
        d_ff: 256,
        ..LMConfig::target_default(t.vocab_size())
    };
    let mut target = TinyLM::<f32>::init(config, 0, Role::Target).unwrap();
    let cfg = TrainConfig {
        objective: Objective::FineTune,
        batch_size: 16,
        lr: 2e-3,
        epochs: 5,
        ..TrainConfig::default()
    };
    finetune(&mut target, &train, None, &cfg).unwrap();
    // Copy, sorted copy and key-value recall, keyed by the prompt's last separator.
    let mut hits = [0usize; 3];
    let mut totals = [0usize; 3];
    for ex in &test.examples {
        let prompt = t.decode_text(&ex.prompt);
        let kind = if prompt.ends_with('|') {
            0
        } else if prompt.ends_with('>') {
            1
        } else {
            2
        };
        let out = generate_greedy(&target, &ex.prompt, ex.completion.len() + 2, EOS).unwrap();
        totals[kind] += 1;
        hits[kind] += usize::from(out[ex.prompt.len()..] == ex.completion[..]);
    }
    let rate = hits.iter().sum::<usize>() as f64 / test.len() as f64;
    assert!(
        rate > 0.95,
        "exact match {rate} (copy {}/{}, sort {}/{}, recall {}/{})",
        hits[0],
        totals[0],
        hits[1],
        totals[1],
        hits[2],
        totals[2]
    );
}
