use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, Write as _};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};

use rft_core::config::RunConfig;
use rft_core::corpus::import::import_dir;
use rft_core::corpus::io::{corpus_from_records, read_corpus, write_corpus};
use rft_core::corpus::synth::synth_corpus;
use rft_core::corpus::{instance_counts, split_corpus, Corpus, Instance, Role, Split, Utterance, KEYWORD_CAP};
use rft_core::cpplm;
use rft_core::evaluation::{self, DetectionRecord, GenerationRecord, Outcome};
use rft_core::keypairs::{build_pairs, count_cooccurrence, pairs_to_string, parse_pairs, relabel_listeners, PairIndex};
use rft_core::model::{examples_from, predict, prepare_example, Example, Model};
use rft_core::training::{self, Checkpoint};
use rft_core::Error;

use crate::{Common, Decode, Switch};

pub const CORPUS: &str = "corpus.jsonl";
pub const PAIRS: &str = "pairs.tsv";
pub const CHECKPOINT: &str = "checkpoint.json";
pub const CONFIG: &str = "config.toml";

fn load_config(c: &Common) -> Result<RunConfig> {
    let path = match &c.config {
        Some(p) => p.clone(),
        None => {
            let p = c.out.join(CONFIG);
            if !p.exists() {
                return Ok(RunConfig::default());
            }
            p
        }
    };
    RunConfig::load(&path).with_context(|| format!("loading {}", path.display()))
}

fn require(path: PathBuf, what: &str, command: &str) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingArtifact { what: what.into(), path, command: command.into() }.into())
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn save_config(c: &Common, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&c.out)?;
    write(&c.out.join(CONFIG), &cfg.to_toml())
}

fn load_corpus(c: &Common, cfg: &RunConfig) -> Result<Corpus> {
    let path = require(c.out.join(CORPUS), "corpus (from synth or import)", "rft synth")?;
    Ok(read_corpus(&path, Some(cfg.corpus.max_vocab))?)
}

fn load_pairs(c: &Common, corpus: &Corpus) -> Result<PairIndex> {
    let path = require(c.out.join(PAIRS), "keyword pairs", "rft pairs")?;
    let text = fs::read_to_string(&path)?;
    Ok(PairIndex::new(&parse_pairs(&path, &text, &corpus.vocab)?))
}

fn split(corpus: &Corpus, cfg: &RunConfig, seed: u64) -> Result<Split> {
    Ok(split_corpus(&corpus.dialogues, cfg.corpus.split, seed)?)
}

fn summary(corpus: &Corpus) -> String {
    let (all, multi) = instance_counts(&corpus.dialogues);
    format!(
        "dialogues={} instances={all} multi_turn={multi} vocab={}",
        corpus.dialogues.len(),
        corpus.vocab.len()
    )
}

pub fn synth(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let syn = synth_corpus(&cfg.corpus.synth, c.seed)?;
    save_config(c, &cfg)?;
    write_corpus(&c.out.join(CORPUS), &syn.corpus)?;
    println!("seed={} {}", c.seed, summary(&syn.corpus));
    Ok(())
}

pub fn import(c: &Common, data: &Path) -> Result<()> {
    let mut cfg = load_config(c)?;
    let records = import_dir(data)?;
    let corpus = corpus_from_records(data, &records, Some(cfg.corpus.max_vocab))?;
    cfg.model.n_emo = cfg.model.n_emo.max(rft_core::corpus::import::ED_EMOTIONS.len());
    save_config(c, &cfg)?;
    write_corpus(&c.out.join(CORPUS), &corpus)?;
    println!("{}", summary(&corpus));
    Ok(())
}

pub fn pairs(c: &Common, threshold: Option<f64>) -> Result<()> {
    let mut cfg = load_config(c)?;
    if let Some(t) = threshold {
        cfg.pairs.pmi_threshold = t;
    }
    let corpus = load_corpus(c, &cfg)?;
    let train = split(&corpus, &cfg, c.seed)?.train;
    let counts = count_cooccurrence(&train)?;
    let pairs = build_pairs(&counts, cfg.pairs.pmi_threshold, &corpus.vocab);
    save_config(c, &cfg)?;
    write(&c.out.join(PAIRS), &pairs_to_string(&pairs, &corpus.vocab))?;
    println!("seed={} pairs={} pmi_threshold={}", c.seed, pairs.len(), cfg.pairs.pmi_threshold);
    Ok(())
}

/// Corpus, pair index and split examples shared by the model commands.
struct Data {
    corpus: Corpus,
    index: PairIndex,
    train: Vec<Example>,
    valid: Vec<Example>,
    test: Vec<Example>,
}

fn load_data(c: &Common, cfg: &RunConfig, seed: u64) -> Result<Data> {
    let corpus = load_corpus(c, cfg)?;
    let index = load_pairs(c, &corpus)?;
    let parts = split(&corpus, cfg, seed)?;
    let ex = |d| examples_from(&relabel_listeners(d, &index), &cfg.model);
    let (train, valid, test) = (ex(&parts.train), ex(&parts.valid), ex(&parts.test));
    Ok(Data { corpus, index, train, valid, test })
}

fn n_emo_of(corpus: &Corpus) -> usize {
    corpus
        .dialogues
        .iter()
        .flat_map(|d| d.utterances.iter().map(|u| u.emotion))
        .max()
        .map_or(0, |e| e + 1)
}

pub fn train(c: &Common) -> Result<()> {
    let mut cfg = load_config(c)?;
    let corpus = load_corpus(c, &cfg)?;
    cfg.model.vocab = corpus.vocab.len();
    let seen = n_emo_of(&corpus);
    if seen > cfg.model.n_emo {
        log::info!("raising n_emo from {} to {seen} to cover the corpus", cfg.model.n_emo);
        cfg.model.n_emo = seen;
    }
    let data = load_data(c, &cfg, c.seed)?;
    let mut model = Model::new(cfg.model.clone(), c.seed)?;
    let t0 = Instant::now();
    let log = training::train(&mut model, &data.train, &data.valid, &data.index, &cfg.train, c.seed)?;
    let secs = t0.elapsed().as_secs_f64();

    save_config(c, &cfg)?;
    Checkpoint::new(&model, &data.corpus.vocab, c.seed, log.best_epoch).save(&c.out.join(CHECKPOINT))?;
    write(&c.out.join("train_log.txt"), &format!("seed={}\n{}", c.seed, log.to_text()))?;
    write(&c.out.join("train_time.txt"), &format!("wall_secs={secs:.3}\n"))?;
    eprintln!("trained {} epochs in {secs:.1}s", log.epochs.len());
    if let Some(epoch) = log.diverged {
        bail!(Error::Diverged { epoch });
    }
    println!("seed={} best_epoch={}", c.seed, log.best_epoch);
    Ok(())
}

/// A trained model with its data and decoding settings applied.
struct Loaded {
    cfg: RunConfig,
    model: Model,
    seed: u64,
    data: Data,
}

fn load_trained(c: &Common, d: &Decode) -> Result<Loaded> {
    let mut cfg = load_config(c)?;
    let path = require(c.out.join(CHECKPOINT), "checkpoint", "rft train")?;
    let ckpt = Checkpoint::load(&path)?;
    let mut model = ckpt.model()?;
    if let Some(t) = d.keyword_threshold {
        model.cfg.keyword_threshold = t;
    }
    if let Some(s) = d.cpplm {
        cfg.cpplm.enabled = matches!(s, Switch::On);
    }
    if let Some(v) = d.cpplm_step_size {
        cfg.cpplm.step_size = v;
    }
    if let Some(v) = d.cpplm_iters {
        cfg.cpplm.n_iter = v;
    }
    if let Some(v) = d.cpplm_tau {
        cfg.cpplm.tau = v;
    }
    if let Some(s) = d.slice {
        cfg.eval.slice = s.into();
    }
    cfg.cpplm.validate()?;
    cfg.model = model.cfg.clone();
    let data = load_data(c, &cfg, ckpt.seed)?;
    if data.corpus.vocab != ckpt.vocab {
        bail!("{} was built from a different corpus; rerun `rft train`", path.display());
    }
    if cfg.cpplm.enabled {
        let reps = data
            .train
            .iter()
            .filter(|e| !e.keywords.is_empty())
            .map(|e| cpplm::pair_rep(&model.params, &model.cfg, &e.response, &e.keywords))
            .collect::<rft_core::Result<Vec<_>>>()?;
        let hist = cpplm::train_discriminator(&mut model.params, &reps, &cfg.cpplm, ckpt.seed);
        log::info!("discriminator loss by epoch: {hist:?}");
    }
    Ok(Loaded { cfg, model, seed: ckpt.seed, data })
}

/// Outcomes over the whole test split; slices are applied when reporting.
fn outcomes(l: &Loaded) -> Result<Vec<Outcome>> {
    if l.data.test.is_empty() {
        bail!("the test split is empty");
    }
    let gen = rft_core::config::GenerationConfig { seed: l.seed, ..l.cfg.generate.clone() };
    Ok(evaluation::run(&l.model.params, &l.model.cfg, &l.data.test, &l.data.index, &gen, &l.cfg.cpplm)?)
}

pub fn generate(c: &Common, d: &Decode, dump_graph: bool) -> Result<()> {
    let l = load_trained(c, d)?;
    let out: Vec<Outcome> = outcomes(&l)?
        .into_iter()
        .filter(|o| evaluation::in_slice(o, l.cfg.eval.slice))
        .collect();
    let vocab = &l.data.corpus.vocab;
    let gens: Vec<_> = out.iter().map(|o| GenerationRecord::new(o, vocab)).collect();
    let dets: Vec<_> = out.iter().map(|o| DetectionRecord::new(o, vocab)).collect();
    write(&c.out.join("generations.jsonl"), &evaluation::to_jsonl(&gens)?)?;
    write(&c.out.join("detections.jsonl"), &evaluation::to_jsonl(&dets)?)?;
    if dump_graph {
        let mut s = String::new();
        for ex in l.data.test.iter().filter(|e| out.iter().any(|o| o.id == e.id)) {
            let pred = predict(&l.model.params, &l.model.cfg, ex, &l.data.index)?;
            let _ = writeln!(s, "# {}", ex.id);
            s.push_str(&pred.graph.dump(vocab));
        }
        write(&c.out.join("graphs.txt"), &s)?;
    }
    println!("seed={} generated={} cpplm={}", l.seed, out.len(), l.cfg.cpplm.enabled);
    Ok(())
}

pub fn eval(c: &Common, d: &Decode) -> Result<()> {
    let l = load_trained(c, d)?;
    let out = outcomes(&l)?;
    let report = evaluation::report(&out, l.cfg.eval.slice, &l.data.corpus.vocab, None)?;
    let text = format!("seed={}\ncpplm={}\n{}\n{}", l.seed, l.cfg.cpplm.enabled, report.to_kv(), report.table());
    write(&c.out.join("report.txt"), &text)?;
    print!("{}", report.table());
    Ok(())
}

pub fn chat(c: &Common, d: &Decode) -> Result<()> {
    let l = load_trained(c, d)?;
    let vocab = &l.data.corpus.vocab;
    let cfg = &l.model.cfg;
    let mut context: Vec<Utterance> = Vec::new();
    let stdin = std::io::stdin();
    let mut stdout = std::io::stdout();
    for (turn, line) in stdin.lock().lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let tokens = vocab.encode(&line);
        let mut u = Utterance::new(Role::Speaker, tokens.clone(), 0);
        u.keyword_positions = (0..tokens.len())
            .filter(|&i| !l.data.index.tails(tokens[i]).is_empty())
            .take(KEYWORD_CAP)
            .collect();
        context.push(u);
        let inst = Instance {
            id: format!("chat#{turn}"),
            context: context.clone(),
            target: Utterance::new(Role::Listener, Vec::new(), 0),
        };
        let ex = prepare_example(&inst, cfg);
        let pred = predict(&l.model.params, cfg, &ex, &l.data.index)?;
        let gen = rft_core::config::GenerationConfig {
            seed: evaluation::instance_seed(l.seed, turn),
            ..l.cfg.generate.clone()
        };
        let guidance = if l.cfg.cpplm.enabled { pred.guidance.as_ref() } else { None };
        let reply = cpplm::generate_guided(&l.model.params, cfg, &pred.cond, &gen, guidance, &l.cfg.cpplm)?;
        let kw = pred.detection.keywords();
        let words: Vec<&str> = kw.iter().map(|&t| vocab.word(t)).collect();
        writeln!(stdout, "emotion={} keywords=[{}]", pred.detection.emotion, words.join(" "))?;
        writeln!(stdout, "{}", vocab.decode(&reply))?;
        stdout.flush()?;

        let mut r = Utterance::new(Role::Listener, reply.clone(), pred.detection.emotion);
        r.keyword_positions = (0..reply.len()).filter(|&i| kw.contains(&reply[i])).take(KEYWORD_CAP).collect();
        context.push(r);
    }
    Ok(())
}
