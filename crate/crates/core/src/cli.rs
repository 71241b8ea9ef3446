//! The `tattn` command line.
//!
//! Exit status: 0 on success, 1 on a usage error, 2 on a data or config
//! error.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::corpus::{self, read_corpus, write_corpus, Sentence, Vocabulary, EOS_ID};
use crate::decoding::{self, format_attention_dump, replace_unk, DecodeOptions, Hypothesis};
use crate::error::{Error, Result};
use crate::lexicon::{train_model1, CandidateSource, Lexicon};
use crate::metrics::{self, corpus_alignment_prf, format_pharaoh_line, read_pharaoh, repetition_stats, AlignmentSet};
use crate::seq2seq::{encode_decode_loss, ModelConfig, Seq2SeqParams};
use crate::subword::{self, learn_bpe, word_frequencies, MergeTable};
use crate::tensor::Tensor;
use crate::training::{train, Pair, TrainCandidates};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "tattn", version, about = "Temporal attention NMT toolkit", arg_required_else_help = true)]
pub struct Cli {
    #[command(flatten)]
    pub shared: Shared,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Default)]
pub struct Shared {
    /// Config file of `key = value` lines; flags override it
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// global | temporal | coverage | local
    #[arg(long, global = true)]
    pub variant: Option<String>,
    #[arg(long, global = true, value_name = "N")]
    pub beam: Option<usize>,
    /// on | off
    #[arg(long, global = true, value_name = "on|off")]
    pub len_norm: Option<String>,
    /// Temporal history length in steps, or `inf`
    #[arg(long, global = true, value_name = "N|inf")]
    pub history_window: Option<String>,
    /// Comma-separated checkpoints decoded as one ensemble
    #[arg(long, global = true, value_name = "PATH,PATH,...", value_delimiter = ',')]
    pub ensemble: Vec<PathBuf>,
    /// Write attention matrices here
    #[arg(long, global = true, value_name = "PATH")]
    pub dump_attn: Option<PathBuf>,
    /// Replace unknown-word output using this lexicon
    #[arg(long, global = true, value_name = "LEXICON")]
    pub replace_unk: Option<PathBuf>,
    /// Any config key, e.g. `--set batch_size=16`; repeatable
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Learn BPE merges from one tokenized corpus
    LearnBpe {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Number of merges (default from config `num_merges`)
        #[arg(long)]
        merges: Option<usize>,
    },
    /// Segment a corpus with learned merges
    ApplyBpe {
        #[arg(long)]
        merges: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Build a frequency-ordered vocabulary
    BuildVocab {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Maximum size including special tokens (default from config `vocab_size`)
        #[arg(long)]
        size: Option<usize>,
    },
    /// Train an IBM Model-1 lexicon
    TrainLexicon {
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        tgt: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Train a model; writes best.ckpt and train.log to the output directory
    Train(TrainArgs),
    /// Translate a tokenized source file
    Translate {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        input: PathBuf,
        /// Defaults to standard output
        #[arg(long)]
        output: Option<PathBuf>,
        /// Join subword units back into words
        #[arg(long)]
        undo_bpe: bool,
    },
    /// Corpus BLEU, TER and TB of a hypothesis file against a reference file
    Eval {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
    },
    /// Forced-decode alignments scored against gold Pharaoh alignments
    AlignEval {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        tgt: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        /// Also write the machine alignments here
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Repetition count and average length over a tokenized file
    RepStats {
        #[arg(long)]
        input: PathBuf,
    },
    /// Write attention matrices, forced when --tgt is given, else decoded
    DumpAttn {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        tgt: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
    },
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub train_src: PathBuf,
    #[arg(long)]
    pub train_tgt: PathBuf,
    #[arg(long)]
    pub dev_src: PathBuf,
    #[arg(long)]
    pub dev_tgt: PathBuf,
    #[arg(long)]
    pub src_vocab: PathBuf,
    #[arg(long)]
    pub tgt_vocab: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Restrict the output layer to per-batch candidate lists from this lexicon
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    /// Overrides config `max_epochs`
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Args, Debug)]
pub struct ModelArgs {
    /// Model checkpoint (or use --ensemble)
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub src_vocab: PathBuf,
    #[arg(long)]
    pub tgt_vocab: PathBuf,
}

/// Parses `argv` (program name first) and runs the command.
pub fn run<I, S>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    EXIT_OK
                }
                _ => {
                    let _ = write!(err, "{text}");
                    EXIT_USAGE
                }
            };
        }
    };
    match dispatch(cli, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_DATA
        }
    }
}

/// Config file first, then `--set`, then the dedicated flags.
pub fn resolve_config(s: &Shared) -> Result<RunConfig> {
    let mut c = match &s.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    for kv in &s.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        c.set(k.trim(), v.trim())?;
    }
    let flags = [
        ("seed", s.seed.map(|x| x.to_string())),
        ("variant", s.variant.clone()),
        ("beam", s.beam.map(|x| x.to_string())),
        ("len_norm", s.len_norm.clone()),
        ("history_window", s.history_window.clone()),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            c.set(k, &v).map_err(|e| Error::Config(format!("--{}: {e}", k.replace('_', "-"))))?;
        }
    }
    Ok(c)
}

fn dispatch(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let cfg = resolve_config(&cli.shared)?;
    let shared = &cli.shared;
    match cli.command {
        Command::LearnBpe { input, output, merges } => {
            let corpus = read_corpus(&input)?;
            let table = learn_bpe(&word_frequencies(&corpus), merges.unwrap_or(cfg.num_merges));
            table.save(&output)?;
            say(out, format!("learned {} merges", table.len()))
        }
        Command::ApplyBpe { merges, input, output } => {
            let table = MergeTable::load(&merges)?;
            let corpus = read_corpus(&input)?;
            let seg: Vec<Sentence> = corpus.iter().map(|s| subword::apply_bpe_sentence(s, &table)).collect();
            write_corpus(&output, &seg)
        }
        Command::BuildVocab { input, output, size } => {
            let v = corpus::build_vocab(&input, size.unwrap_or(cfg.vocab_size), cfg.min_count)?;
            v.save(&output)?;
            say(out, format!("vocabulary of {} entries", v.len()))
        }
        Command::TrainLexicon { src, tgt, output } => {
            let bitext = read_bitext(&src, &tgt)?;
            let report = train_model1(&bitext, cfg.model1_iterations, cfg.model1_null)?;
            report.lexicon.save(&output)?;
            for (i, ll) in report.log_likelihood.iter().enumerate() {
                say(out, format!("em_step={} log_likelihood={:.6}", i, ll))?;
            }
            Ok(())
        }
        Command::Train(a) => run_train(&cfg, &a, out),
        Command::Translate { model, input, output, undo_bpe } => {
            let models = load_models(&model, shared)?;
            let vocabs = load_vocabs(&model)?;
            let opts = cfg.decode_options()?;
            let sources = read_corpus(&input)?;
            let hyps = decode_all(&models, &vocabs.0, &sources, &opts)?;
            let lex = shared.replace_unk.as_deref().map(Lexicon::load).transpose()?;
            let mut lines = String::new();
            for (src, h) in sources.iter().zip(&hyps) {
                let mut words = vocabs.1.decode(h.content());
                if shared.replace_unk.is_some() {
                    words = replace_unk(&words, &h.attention, src, lex.as_ref());
                }
                if undo_bpe {
                    words = subword::undo_bpe(&words);
                }
                lines.push_str(&words.join(" "));
                lines.push('\n');
            }
            match output {
                Some(p) => fs::write(&p, lines).map_err(|e| Error::io(&p, e))?,
                None => out.write_all(lines.as_bytes()).map_err(|e| Error::io("<stdout>", e))?,
            }
            if let Some(p) = &shared.dump_attn {
                let blocks: Vec<_> = sources.iter().zip(&hyps).map(|(s, h)| (h.attention.clone(), s.len())).collect();
                write_file(p, &format_attention_dump(&blocks))?;
            }
            Ok(())
        }
        Command::Eval { hyp, reference } => {
            let h = read_corpus(&hyp)?;
            let r = read_corpus(&reference)?;
            say(out, metrics::evaluate(&h, &r)?.to_string())
        }
        Command::AlignEval { model, src, tgt, gold, output } => {
            let (params, mcfg) = single_model(&model, shared)?;
            let (sv, tv) = load_vocabs(&model)?;
            let bitext = read_bitext(&src, &tgt)?;
            let gold = read_pharaoh(&gold)?;
            if gold.len() != bitext.len() {
                return Err(Error::Config(format!(
                    "gold alignments have {} lines but the corpus has {} sentences",
                    gold.len(),
                    bitext.len()
                )));
            }
            let machine: Vec<AlignmentSet> = bitext
                .par_iter()
                .map(|(s, t)| forced_alignment(&params, &mcfg, &sv, &tv, s, t))
                .collect::<Result<_>>()?;
            if let Some(p) = output {
                let text: String = machine.iter().map(|a| format_pharaoh_line(a) + "\n").collect();
                write_file(&p, &text)?;
            }
            say(out, corpus_alignment_prf(&machine, &gold)?.to_string())
        }
        Command::RepStats { input } => {
            let r = repetition_stats(&read_corpus(&input)?);
            say(out, format!("count={} avg_length={:.3}", r.count, r.avg_length))
        }
        Command::DumpAttn { model, src, tgt, output } => {
            let (sv, tv) = load_vocabs(&model)?;
            let sources = read_corpus(&src)?;
            let blocks: Vec<(Vec<Vec<f64>>, usize)> = match tgt {
                Some(tgt) => {
                    let (params, mcfg) = single_model(&model, shared)?;
                    let bitext = read_bitext(&src, &tgt)?;
                    bitext
                        .par_iter()
                        .map(|(s, t)| {
                            let (sid, tid) = encode_pair(&sv, &tv, s, t);
                            if sid.is_empty() {
                                return Ok((Vec::new(), 0));
                            }
                            let (_, attn) = encode_decode_loss(&params, &mcfg, &sid, &tid, None)?;
                            Ok((attn.rows, sid.len()))
                        })
                        .collect::<Result<_>>()?
                }
                None => {
                    let models = load_models(&model, shared)?;
                    let hyps = decode_all(&models, &sv, &sources, &cfg.decode_options()?)?;
                    sources.iter().zip(hyps).map(|(s, h)| (h.attention, s.len())).collect()
                }
            };
            write_file(&output, &format_attention_dump(&blocks))
        }
    }
}

fn say(out: &mut dyn Write, line: String) -> Result<()> {
    writeln!(out, "{line}").map_err(|e| Error::io("<stdout>", e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_bitext(src: &Path, tgt: &Path) -> Result<Vec<(Sentence, Sentence)>> {
    let s = read_corpus(src)?;
    let t = read_corpus(tgt)?;
    if s.len() != t.len() {
        return Err(Error::Config(format!(
            "{} has {} lines but {} has {}",
            src.display(),
            s.len(),
            tgt.display(),
            t.len()
        )));
    }
    Ok(s.into_iter().zip(t).collect())
}

fn encode_pair(sv: &Vocabulary, tv: &Vocabulary, s: &[String], t: &[String]) -> (Vec<usize>, Vec<usize>) {
    let mut sid = sv.encode(s);
    sid.pop();
    (sid, tv.encode(t))
}

fn forced_alignment(
    params: &Seq2SeqParams<Tensor<f32>>,
    cfg: &ModelConfig,
    sv: &Vocabulary,
    tv: &Vocabulary,
    s: &[String],
    t: &[String],
) -> Result<AlignmentSet> {
    let (sid, tid) = encode_pair(sv, tv, s, t);
    if sid.is_empty() || tid.len() < 2 {
        return Ok(AlignmentSet::new());
    }
    crate::seq2seq::forced_decode_alignments(params, cfg, &sid, &tid)
}

fn load_vocabs(m: &ModelArgs) -> Result<(Vocabulary, Vocabulary)> {
    Ok((Vocabulary::load(&m.src_vocab)?, Vocabulary::load(&m.tgt_vocab)?))
}

type Loaded = (Seq2SeqParams<Tensor<f32>>, ModelConfig);

fn load_models(m: &ModelArgs, shared: &Shared) -> Result<Vec<Loaded>> {
    let paths: Vec<&PathBuf> = if shared.ensemble.is_empty() {
        vec![m
            .checkpoint
            .as_ref()
            .ok_or_else(|| Error::Config("--checkpoint or --ensemble is required".into()))?]
    } else {
        shared.ensemble.iter().collect()
    };
    let models: Vec<Loaded> = paths
        .into_iter()
        .map(|p| Checkpoint::load(p).map(|c| (c.params, c.config)))
        .collect::<Result<_>>()?;
    let (sv, tv) = load_vocabs(m)?;
    for (_, c) in &models {
        if c.src_vocab != sv.len() || c.tgt_vocab != tv.len() {
            return Err(Error::Config(format!(
                "checkpoint vocabulary sizes {}/{} do not match the vocabulary files {}/{}",
                c.src_vocab,
                c.tgt_vocab,
                sv.len(),
                tv.len()
            )));
        }
    }
    Ok(models)
}

fn single_model(m: &ModelArgs, shared: &Shared) -> Result<Loaded> {
    let mut v = load_models(m, shared)?;
    if v.len() != 1 {
        return Err(Error::Config("this command takes one checkpoint, not an ensemble".into()));
    }
    Ok(v.pop().unwrap())
}

fn decode_all(models: &[Loaded], sv: &Vocabulary, sources: &[Sentence], opts: &DecodeOptions) -> Result<Vec<Hypothesis>> {
    let refs: Vec<(&Seq2SeqParams<Tensor<f32>>, &ModelConfig)> = models.iter().map(|(p, c)| (p, c)).collect();
    sources
        .par_iter()
        .map(|s| {
            let mut ids = sv.encode(s);
            ids.pop();
            if ids.is_empty() {
                return Ok(Hypothesis {
                    tokens: vec![EOS_ID],
                    log_prob: 0.0,
                    attention: Vec::new(),
                    finished: true,
                });
            }
            if refs.len() == 1 {
                decoding::translate(refs[0].0, refs[0].1, &ids, opts)
            } else {
                decoding::ensemble_decode(&refs, &ids, opts)
            }
        })
        .collect()
}

fn run_train(cfg: &RunConfig, a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let sv = Vocabulary::load(&a.src_vocab)?;
    let tv = Vocabulary::load(&a.tgt_vocab)?;
    let train_pairs: Vec<Pair> = corpus::encode_bitext(&read_corpus(&a.train_src)?, &read_corpus(&a.train_tgt)?, &sv, &tv)?;
    let dev_pairs: Vec<Pair> = corpus::encode_bitext(&read_corpus(&a.dev_src)?, &read_corpus(&a.dev_tgt)?, &sv, &tv)?;
    let mut cfg = cfg.clone();
    if let Some(e) = a.epochs {
        cfg.max_epochs = e;
    }
    let model = cfg.model_config(sv.len(), tv.len())?;
    fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    let tcfg = cfg.train_config(Some(a.out_dir.clone()))?;
    let lexicon = a.lexicon.as_deref().map(Lexicon::load).transpose()?;
    let candidates = lexicon.as_ref().map(|lex| TrainCandidates {
        source: CandidateSource::new(lex, &tv, cfg.cand_frequent, cfg.cand_k),
        src_vocab: &sv,
    });
    let outcome = train::<f32>(model, tcfg, &train_pairs, &dev_pairs, candidates)?;
    let mut log = outcome.log.join("\n");
    log.push('\n');
    write_file(&a.out_dir.join("train.log"), &log)?;
    write_file(&a.out_dir.join("run.cfg"), &cfg.to_text())?;
    out.write_all(log.as_bytes()).map_err(|e| Error::io("<stdout>", e))?;
    say(
        out,
        format!(
            "best epoch={} metric={:.6} checkpoint={}",
            outcome.best_epoch,
            outcome.best_metric,
            a.out_dir.join("best.ckpt").display()
        ),
    )
}
