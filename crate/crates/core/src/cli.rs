//! Command-line surface: gen-data / train / decode / sample / eval /
//! analyze. Exit codes: 0 success, 1 usage error, 2 runtime error.

use std::collections::BTreeMap;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path as FsPath, PathBuf};

use crate::config::Config;
use crate::data::{gen_corpus, load_corpus, load_vocab, modality_balance_warnings, save_corpus, save_vocab};
use crate::decoding::{batch_sample, dedup, lookahead_decode, DecodeConfig};
use crate::error::{Error, Result};
use crate::lattice::Vocabulary;
use crate::model::{forward, load_checkpoint_file, ModelParams};
use crate::objectives::strip_specials;
use crate::trainer::{evaluate, oracle_bleu_curve, train, EvalOptions, StopPoint, TrainData};

const USAGE: &str = "usage: daglat <command> [flags]

commands:
  gen-data   --out DIR [--config PATH] [--seed N]
  train      --data DIR --workdir DIR [--config PATH] [--seed N]
             [--objective mle|contrastive|reward] [--halt-after-steps N]
  decode     --checkpoint PATH --vocab PATH [--input PATH|-] [--out PATH|-]
             [--dump-paths]
  sample     --checkpoint PATH --vocab PATH [--input PATH|-] [--out PATH|-]
             [--k N] [--tau F] [--top-p F] [--beta F] [--seed N] [--dump-paths]
  eval       --checkpoint PATH --vocab PATH --data PATH [--out PATH|-]
             [--k N] [--tau F] [--top-p F] [--beta F] [--seed N]
  analyze    --checkpoint PATH --vocab PATH --data PATH [--out PATH|-]
             [--k N] [--tau F] [--top-p F] [--beta F] [--seed N]

config files are `key = value` lines with `#` comments; unknown keys and
flags are rejected.";

struct Flags {
    values: BTreeMap<String, String>,
    switches: Vec<String>,
}

fn parse_flags(args: &[String], value_flags: &[&str], switch_flags: &[&str]) -> Result<Flags> {
    let mut values = BTreeMap::new();
    let mut switches = Vec::new();
    let mut i = 0;
    while i < args.len() {
        let arg = &args[i];
        let Some(name) = arg.strip_prefix("--") else {
            return Err(Error::Config(format!("unexpected argument '{arg}'")));
        };
        if switch_flags.contains(&name) {
            switches.push(name.to_string());
            i += 1;
        } else if value_flags.contains(&name) {
            let value = args
                .get(i + 1)
                .ok_or_else(|| Error::Config(format!("flag --{name} needs a value")))?;
            values.insert(name.to_string(), value.clone());
            i += 2;
        } else {
            return Err(Error::Config(format!("unknown flag --{name}")));
        }
    }
    Ok(Flags { values, switches })
}

impl Flags {
    fn get(&self, name: &str) -> Option<&String> {
        self.values.get(name)
    }

    fn require(&self, name: &str) -> Result<&String> {
        self.get(name)
            .ok_or_else(|| Error::Config(format!("missing required flag --{name}")))
    }

    fn parse<T: std::str::FromStr>(&self, name: &str) -> Result<Option<T>> {
        match self.get(name) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("bad value '{v}' for --{name}"))),
        }
    }

    fn has(&self, name: &str) -> bool {
        self.switches.iter().any(|s| s == name)
    }
}

fn load_config(flags: &Flags) -> Result<Config> {
    let mut cfg = match flags.get("config") {
        Some(path) => Config::load(FsPath::new(path))?,
        None => Config::default(),
    };
    if let Some(seed) = flags.parse::<u64>("seed")? {
        cfg.seed = seed;
    }
    if let Some(objective) = flags.get("objective") {
        cfg.objective = objective.parse()?;
    }
    Ok(cfg)
}

fn cmd_gen_data(args: &[String]) -> Result<()> {
    let flags = parse_flags(args, &["config", "out", "seed"], &[])?;
    let cfg = load_config(&flags)?;
    let out = PathBuf::from(flags.require("out")?);
    std::fs::create_dir_all(&out)?;
    let spec = cfg.task_spec();
    let corpus = gen_corpus(&spec)?;
    for warning in modality_balance_warnings(&spec, &corpus.train) {
        eprintln!("warning: {warning}");
    }
    save_vocab(&out.join("vocab.txt"), &corpus.vocab)?;
    save_corpus(&out.join("train.tsv"), &corpus.vocab, &corpus.train, false)?;
    save_corpus(&out.join("valid.tsv"), &corpus.vocab, &corpus.valid, true)?;
    save_corpus(&out.join("test.tsv"), &corpus.vocab, &corpus.test, true)?;
    std::fs::write(out.join("config.resolved.cfg"), cfg.render())?;
    println!(
        "wrote {} train / {} valid / {} test examples to {}",
        corpus.train.len(),
        corpus.valid.len(),
        corpus.test.len(),
        out.display()
    );
    Ok(())
}

fn cmd_train(args: &[String]) -> Result<()> {
    let flags = parse_flags(
        args,
        &["config", "data", "workdir", "seed", "objective", "halt-after-steps"],
        &[],
    )?;
    let cfg = load_config(&flags)?;
    let data_dir = PathBuf::from(flags.require("data")?);
    let workdir = PathBuf::from(flags.require("workdir")?);
    let vocab = load_vocab(&data_dir.join("vocab.txt"))?;
    let data = TrainData {
        train: load_corpus(&data_dir.join("train.tsv"), &vocab, false)?,
        valid: load_corpus(&data_dir.join("valid.tsv"), &vocab, true)?,
        vocab,
    };
    let stop = flags
        .parse::<usize>("halt-after-steps")?
        .map(StopPoint::Stage1Step);
    match train(&cfg, &data, Some(&workdir), stop)? {
        Some(outcome) => {
            println!(
                "trained: alpha {:.4}, stage-1 valid dp {:.4}, stage-2 valid dp {:.4}, final checkpoint {}",
                outcome.alpha,
                outcome.stage1_valid_dp,
                outcome.stage2_valid_dp,
                workdir.join(crate::trainer::FINAL_FILE).display()
            );
        }
        None => {
            println!("halted; resume by re-running with the same --workdir");
        }
    }
    Ok(())
}

fn read_lines(path: Option<&String>) -> Result<Vec<String>> {
    match path.map(String::as_str) {
        None | Some("-") => {
            let stdin = std::io::stdin();
            let mut lines = Vec::new();
            for line in stdin.lock().lines() {
                lines.push(line?);
            }
            Ok(lines)
        }
        Some(p) => Ok(std::fs::read_to_string(p)?
            .lines()
            .map(str::to_string)
            .collect()),
    }
}

fn open_out(path: Option<&String>) -> Result<Box<dyn Write>> {
    match path.map(String::as_str) {
        None | Some("-") => Ok(Box::new(BufWriter::new(std::io::stdout()))),
        Some(p) => Ok(Box::new(BufWriter::new(std::fs::File::create(p)?))),
    }
}

fn load_model(flags: &Flags) -> Result<(ModelParams, Vocabulary)> {
    let (params, _) = load_checkpoint_file(FsPath::new(flags.require("checkpoint")?))?;
    let vocab = load_vocab(FsPath::new(flags.require("vocab")?))?;
    if vocab.len() != params.config.vocab {
        return Err(Error::Config(format!(
            "vocabulary has {} entries but the checkpoint was trained with {}",
            vocab.len(),
            params.config.vocab
        )));
    }
    Ok((params, vocab))
}

fn frame_source(vocab: &Vocabulary, line: &str) -> Vec<u32> {
    let mut ids = vec![crate::lattice::BOS];
    ids.extend(line.split_whitespace().map(|s| vocab.lookup(s)));
    ids.push(crate::lattice::EOS);
    ids
}

fn hypothesis_line(
    vocab: &Vocabulary,
    h: &crate::lattice::Hypothesis,
    dump_paths: bool,
) -> String {
    let content = strip_specials(&h.tokens);
    let text: Vec<&str> = content.iter().map(|&t| vocab.surface(t)).collect();
    if dump_paths {
        let path: Vec<String> = h.path.0.iter().map(|i| i.to_string()).collect();
        format!(
            "{}\t{}\t{:.6}\t{:.6}",
            text.join(" "),
            path.join(" "),
            h.log_transition,
            h.log_emission
        )
    } else {
        text.join(" ")
    }
}

fn cmd_decode(args: &[String]) -> Result<()> {
    let flags = parse_flags(
        args,
        &["checkpoint", "vocab", "input", "out"],
        &["dump-paths"],
    )?;
    let (params, vocab) = load_model(&flags)?;
    let lines = read_lines(flags.get("input"))?;
    let mut out = open_out(flags.get("out"))?;
    for line in &lines {
        let src = frame_source(&vocab, line);
        let pass = forward(&params, &src, None)?;
        let hyp = lookahead_decode(&pass.lattice, pass.lattice.positions())?;
        writeln!(out, "{}", hypothesis_line(&vocab, &hyp, flags.has("dump-paths")))?;
    }
    Ok(())
}

fn cmd_sample(args: &[String]) -> Result<()> {
    let flags = parse_flags(
        args,
        &["checkpoint", "vocab", "input", "out", "k", "tau", "top-p", "beta", "seed"],
        &["dump-paths"],
    )?;
    let (params, vocab) = load_model(&flags)?;
    let k = flags.parse::<usize>("k")?.unwrap_or(128);
    let tau = flags.parse::<f64>("tau")?.unwrap_or(0.05);
    let top_p = flags.parse::<f64>("top-p")?.unwrap_or(0.5);
    let beta = flags.parse::<f64>("beta")?.unwrap_or(0.5);
    let seed = flags.parse::<u64>("seed")?.unwrap_or(0);
    let lines = read_lines(flags.get("input"))?;
    let mut out = open_out(flags.get("out"))?;
    for (idx, line) in lines.iter().enumerate() {
        let src = frame_source(&vocab, line);
        let pass = forward(&params, &src, None)?;
        let dc = DecodeConfig {
            max_step: pass.lattice.positions(),
            tau,
            top_p,
            k,
            beta,
            seed: crate::rng::mix(seed, &[idx as u64]),
        };
        let samples = batch_sample(&pass.lattice, &dc)?;
        let ranked = dedup(samples, beta);
        let best = ranked
            .first()
            .ok_or_else(|| Error::InvalidTarget("sampler returned nothing".into()))?;
        writeln!(out, "{}", hypothesis_line(&vocab, best, flags.has("dump-paths")))?;
    }
    Ok(())
}

fn eval_options(flags: &Flags) -> Result<EvalOptions> {
    Ok(EvalOptions {
        k: flags.parse::<usize>("k")?.unwrap_or(128),
        tau: flags.parse::<f64>("tau")?.unwrap_or(0.05),
        top_p: flags.parse::<f64>("top-p")?.unwrap_or(0.5),
        beta: flags.parse::<f64>("beta")?.unwrap_or(0.5),
        seed: flags.parse::<u64>("seed")?.unwrap_or(0),
    })
}

fn cmd_eval(args: &[String]) -> Result<()> {
    let flags = parse_flags(
        args,
        &["checkpoint", "vocab", "data", "out", "k", "tau", "top-p", "beta", "seed"],
        &[],
    )?;
    let (params, vocab) = load_model(&flags)?;
    let corpus = load_corpus(FsPath::new(flags.require("data")?), &vocab, true)?;
    let report = evaluate(&params, &corpus, &eval_options(&flags)?)?;
    let mut out = open_out(flags.get("out"))?;
    writeln!(out, "{}", serde_json::to_string(&report).expect("serializable report"))?;
    Ok(())
}

fn cmd_analyze(args: &[String]) -> Result<()> {
    let flags = parse_flags(
        args,
        &["checkpoint", "vocab", "data", "out", "k", "tau", "top-p", "beta", "seed"],
        &[],
    )?;
    let (params, vocab) = load_model(&flags)?;
    let corpus = load_corpus(FsPath::new(flags.require("data")?), &vocab, true)?;
    let opts = eval_options(&flags)?;
    let mut ks = Vec::new();
    let mut k = 1;
    while k < opts.k {
        ks.push(k);
        k *= 2;
    }
    ks.push(opts.k);
    let curves = oracle_bleu_curve(&params, &corpus, &ks, &opts)?;
    let mut out = open_out(flags.get("out"))?;
    for (idx, curve) in curves.iter().enumerate() {
        let points: BTreeMap<String, f64> =
            curve.iter().map(|&(k, b)| (k.to_string(), b)).collect();
        let record = serde_json::json!({ "input": idx, "oracle_bleu_at": points });
        writeln!(out, "{record}")?;
    }
    Ok(())
}

/// Entry point; returns the process exit code.
pub fn run(args: Vec<String>) -> i32 {
    let Some(command) = args.first() else {
        eprintln!("{USAGE}");
        return 1;
    };
    let rest = &args[1..];
    let result = match command.as_str() {
        "gen-data" => cmd_gen_data(rest),
        "train" => cmd_train(rest),
        "decode" => cmd_decode(rest),
        "sample" => cmd_sample(rest),
        "eval" => cmd_eval(rest),
        "analyze" => cmd_analyze(rest),
        "--help" | "help" => {
            println!("{USAGE}");
            return 0;
        }
        other => {
            eprintln!("unknown command '{other}'\n{USAGE}");
            return 1;
        }
    };
    match result {
        Ok(()) => 0,
        Err(e @ (Error::Config(_) | Error::Parse { .. })) => {
            eprintln!("error: {e}\n{USAGE}");
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}
