use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use assertrag::checkpoint::Checkpoint;
use assertrag::corpus::{split_corpus, Corpus, SplitSpec};
use assertrag::experiment::{ablation_table, run_mode, ModeResult, Splits};
use assertrag::inference::{read_predictions, write_predictions, Generator, Provenance};
use assertrag::metrics::{evaluate as score, overlap_analysis, CodeBleuWeights};
use assertrag::model::Seq2SeqModel;
use assertrag::retriever::DenseIndex;
use assertrag::synthbench::{generate_synthetic, Family, SynthCorpus, SynthSpec};
use assertrag::tokenizer::{train_bpe, SpecialTokens, Tokenizer};
use assertrag::trainer::{self, finetuned_retriever, strategy, EpochControl, RetrieverMode, TrainData};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

const SPLITS: [&str; 3] = ["train", "valid", "test"];
const PLANTED: &str = "planted.jsonl";

fn split_paths(dir: &Path, split: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{split}.source")), dir.join(format!("{split}.target")))
}

fn load_split(dir: &Path, split: &str) -> Result<Corpus> {
    let (s, t) = split_paths(dir, split);
    Ok(Corpus::load(&s, &t, split)?)
}

fn write_splits(dir: &Path, splits: [&Corpus; 3]) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for (name, c) in SPLITS.iter().zip(splits) {
        let (s, t) = split_paths(dir, name);
        c.write(&s, &t)?;
        print!("{}", c.type_stats().table(name));
    }
    Ok(())
}

pub fn prepare_files(cfg: &RunConfig, source: &Path, target: &Path, out: Option<&Path>) -> Result<()> {
    let corpus = Corpus::load(source, target, "corpus")?;
    print!("{}", corpus.type_stats().table("corpus"));
    if let Some(out) = out {
        let (train, valid, test) = split_corpus(&corpus, &SplitSpec { seed: cfg.split_seed, ..SplitSpec::default() })?;
        write_splits(out, [&train, &valid, &test])?;
    }
    Ok(())
}

pub fn prepare_synthetic(cfg: &RunConfig, family: &str, n: usize, out: &Path) -> Result<()> {
    let family: Family = family.parse()?;
    let data = generate_synthetic(&SynthSpec::new(family, n, cfg.seed))?;
    write_splits(out, [&data.train, &data.valid, &data.test])?;
    data.write_sidecar(&out.join(PLANTED))?;
    Ok(())
}

pub fn train_tokenizer(cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let train = load_split(data, "train")?;
    let tok = train_bpe(&train, cfg.vocab_size, &SpecialTokens::default())?;
    tok.save(out)?;
    println!("tokenizer\t{}\tvocab {}\tsha256 {}", out.display(), tok.vocab_size(), tok.content_hash());
    Ok(())
}

pub fn train(cfg: &RunConfig, data: &Path, tok_path: &Path, out: &Path) -> Result<()> {
    let tok = Tokenizer::load(tok_path)?;
    let (train, valid) = (load_split(data, "train")?, load_split(data, "valid")?);
    let tcfg = cfg.train()?;
    let model = Seq2SeqModel::new(cfg.model(tok.vocab_size())?, tcfg.seed)?;
    let td = TrainData { train: &train, codebase: &train, valid: &valid, tok: &tok };
    let phi = match tcfg.mode {
        RetrieverMode::FrozenFinetuned => Some(finetuned_retriever(&td, model.clone(), &tcfg)?),
        _ => None,
    };
    let outcome = trainer::train(&td, model, phi, &tcfg, &mut |v| {
        eprintln!("epoch {}\tloss {:.4}\tvalid BLEU {:.4}", v.record.epoch, v.record.loss, v.record.valid_bleu);
        Ok(EpochControl::Continue)
    })?;
    let ck = Checkpoint::from_state(&outcome.best, &tcfg, &tok.content_hash(), &outcome.history);
    ck.save(out)?;
    let log = log_path(out);
    std::fs::write(&log, outcome.history.log_lines()).with_context(|| format!("writing {}", log.display()))?;
    println!(
        "checkpoint\t{}\tbest epoch {}\tsha256 {}",
        out.display(),
        outcome.best.epoch,
        ck.content_hash()?
    );
    Ok(())
}

fn log_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".log");
    PathBuf::from(s)
}

fn meta_path(index: &Path) -> PathBuf {
    let mut s = index.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

/// Artifacts an index was built from.
#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct IndexMeta {
    checkpoint_sha256: String,
    tokenizer_sha256: String,
    codebase_len: usize,
}

/// Checkpoint checked against the tokenizer it is used with.
fn load_pair(tok_path: &Path, ckpt: &Path) -> Result<(Tokenizer, Checkpoint)> {
    let tok = Tokenizer::load(tok_path)?;
    let ck = Checkpoint::load(ckpt)?;
    ck.check_tokenizer(&tok.content_hash())?;
    Ok((tok, ck))
}

pub fn index(data: &Path, tok_path: &Path, ckpt: &Path, out: &Path) -> Result<()> {
    let (tok, ck) = load_pair(tok_path, ckpt)?;
    let Some(r) = &ck.retriever else {
        bail!("checkpoint was trained in mode {} and has no dense retriever", ck.train.mode);
    };
    let train = load_split(data, "train")?;
    let idx = DenseIndex::build(&train, r, &tok, ck.epoch as u64)?;
    idx.save(out)?;
    let meta = IndexMeta {
        checkpoint_sha256: ck.content_hash()?,
        tokenizer_sha256: tok.content_hash(),
        codebase_len: train.len(),
    };
    let mp = meta_path(out);
    std::fs::write(&mp, serde_json::to_string_pretty(&meta)?).with_context(|| format!("writing {}", mp.display()))?;
    println!("index\t{}\t{} entries\tdim {}", out.display(), idx.len(), idx.dim());
    Ok(())
}

/// The index for a dense checkpoint: loaded (and checked) when a path is
/// given, rebuilt otherwise.
fn dense_index(ck: &Checkpoint, tok: &Tokenizer, train: &Corpus, path: Option<&Path>) -> Result<Option<DenseIndex>> {
    let Some(r) = ck.retriever.as_ref().filter(|_| ck.train.mode.is_dense()) else {
        return Ok(None);
    };
    let Some(path) = path else {
        return Ok(Some(DenseIndex::build(train, r, tok, ck.epoch as u64)?));
    };
    let mp = meta_path(path);
    let meta: IndexMeta = serde_json::from_str(
        &std::fs::read_to_string(&mp).with_context(|| format!("reading {}", mp.display()))?,
    )?;
    let want = IndexMeta {
        checkpoint_sha256: ck.content_hash()?,
        tokenizer_sha256: tok.content_hash(),
        codebase_len: train.len(),
    };
    if meta != want {
        bail!("index {} was built from different artifacts than the given checkpoint/tokenizer/codebase", path.display());
    }
    Ok(Some(DenseIndex::load(path)?))
}

pub fn retrieve(
    cfg: &RunConfig,
    data: &Path,
    tok_path: &Path,
    ckpt: &Path,
    index_path: Option<&Path>,
    query: Option<String>,
    split: &str,
) -> Result<()> {
    let (tok, ck) = load_pair(tok_path, ckpt)?;
    let train = load_split(data, "train")?;
    let idx = dense_index(&ck, &tok, &train, index_path)?;
    let strat = strategy(&ck.train, ck.retriever.as_ref(), idx.as_ref());
    let queries: Vec<(usize, String)> = match query {
        Some(q) => vec![(0, q)],
        None => load_split(data, split)?.pairs().iter().map(|p| (p.id, p.focal_test.clone())).collect(),
    };
    let mut out = String::from("query\trank\tid\tscore\tprobability\tassertion\n");
    for (qid, ft) in queries {
        let hits = strat.retrieve(&train, &tok, &ft, cfg.k, None, cfg.prob_mode()?, qid as u64)?;
        for (rank, h) in hits.iter().enumerate() {
            let _ = writeln!(out, "{qid}\t{}\t{}\t{:.6}\t{:.6}\t{}", rank + 1, h.pair.id, h.score, h.probability, h.pair.assertion);
        }
    }
    print!("{out}");
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn generate(
    cfg: &RunConfig,
    data: &Path,
    tok_path: &Path,
    ckpt: &Path,
    index_path: Option<&Path>,
    split: &str,
    out: &Path,
) -> Result<()> {
    let (tok, ck) = load_pair(tok_path, ckpt)?;
    let train = load_split(data, "train")?;
    let queries = load_split(data, split)?;
    let idx = dense_index(&ck, &tok, &train, index_path)?;
    let generator = Generator {
        model: &ck.model,
        tok: &tok,
        codebase: &train,
        strategy: strategy(&ck.train, ck.retriever.as_ref(), idx.as_ref()),
        k: cfg.k,
        beam: cfg.beam,
        prob_mode: cfg.prob_mode()?,
    };
    let mut preds = Vec::with_capacity(queries.len());
    let mut prov: Vec<Provenance> = Vec::with_capacity(queries.len());
    for q in queries.pairs() {
        let g = generator.generate(&q.focal_test, q.id as u64)?;
        prov.push(Provenance::from_generation(q.id, &g));
        preds.push(g.assertion);
    }
    let mut side = out.as_os_str().to_owned();
    side.push(".provenance.jsonl");
    write_predictions(out, &preds, Some((Path::new(&side), &prov)))?;
    println!("predictions\t{}\t{} queries", out.display(), preds.len());
    Ok(())
}

pub fn evaluate(data: &Path, split: &str, preds: &Path, report: Option<&Path>, name: &str) -> Result<()> {
    let golds = load_split(data, split)?;
    let preds = read_predictions(preds)?;
    let r = score(&preds, &golds, CodeBleuWeights::default())?;
    if let Some(path) = report {
        r.save(path)?;
    }
    print!("{}", r.table(name));
    Ok(())
}

pub fn ablate(cfg: &RunConfig, data: &Path, tok_path: &Path, modes: &[String], out: Option<&Path>) -> Result<()> {
    let tok = Tokenizer::load(tok_path)?;
    let [train, valid, test] = SPLITS.map(|s| load_split(data, s));
    let (train, valid, test) = (train?, valid?, test?);
    let splits = Splits { train: &train, valid: &valid, test: &test, tok: &tok };
    let modes: Vec<RetrieverMode> = if modes.is_empty() {
        RetrieverMode::ALL.to_vec()
    } else {
        modes.iter().map(|m| m.parse()).collect::<assertrag::Result<_>>()?
    };
    let model_cfg = cfg.model(tok.vocab_size())?;
    let mut results: Vec<ModeResult> = Vec::new();
    for mode in modes {
        eprintln!("training {mode}");
        let tcfg = assertrag::trainer::TrainConfig { mode, ..cfg.train()? };
        results.push(run_mode(&splits, &model_cfg, &tcfg)?);
    }
    let mut table = ablation_table(&results);
    let sidecar = data.join(PLANTED);
    if sidecar.exists() {
        let planted = SynthCorpus::read_sidecar(&sidecar)?;
        let expected = |q: usize| planted.iter().find(|p| p.split == "test" && p.query_id == q).map(|p| p.match_id);
        let _ = writeln!(table, "\nRetriever\tTop-1 planted hits");
        for r in &results {
            let _ = writeln!(table, "{}\t{}/{}", r.mode, r.top1_hits(expected), test.len());
        }
    }
    print!("{table}");
    if let Some(out) = out {
        std::fs::write(out, &table).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

pub fn overlap(data: &Path, split: &str, systems: &[String]) -> Result<()> {
    if systems.len() < 2 {
        bail!("overlap needs at least two --system entries");
    }
    let golds = load_split(data, split)?;
    let mut loaded = Vec::with_capacity(systems.len());
    for s in systems {
        let Some((name, file)) = s.split_once('=') else {
            bail!("system '{s}' is not NAME=FILE");
        };
        loaded.push((name.to_string(), read_predictions(Path::new(file))?));
    }
    print!("{}", overlap_analysis(&loaded, &golds)?.table());
    Ok(())
}
