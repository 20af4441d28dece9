use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use zpmt::annotate::lm::{DEFAULT_FLOOR, DEFAULT_LAMBDAS};
use zpmt::annotate::{annotate_corpus, train_ibm1, Alignments, NGramLm, PronounVocab};
use zpmt::corpus::io::{read_blocks, write_blocks, write_labels};
use zpmt::corpus::{
    load_documents, load_source_documents, read_alignments, Document, LabelSet, ZpLabelSequence,
};
use zpmt::decode::{sources, translate_all, DecodeConfig};
use zpmt::eval::{bleu, sentence_bleu, sign_test, zp_prf};
use zpmt::kv::KeyValues;
use zpmt::model::{Model, ModelBundle, ModelConfig, MODEL_KEYS};
use zpmt::synth::{self, GenConfig};
use zpmt::train::{
    ablation_matrix, format_ablation, format_log, train, Dataset, TrainConfig, TRAIN_KEYS,
};
use zpmt::{Error, Result};

const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser)]
#[command(
    name = "zpmt",
    version,
    about = "Joint zero-pronoun prediction and translation",
    arg_required_else_help = true
)]
struct Cli {
    /// Upper bound on worker threads used for decoding.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic pro-drop corpus (train/valid/test splits).
    GenCorpus(GenArgs),
    /// Label dropped pronouns in a parallel corpus from word alignments.
    Annotate(AnnotateArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Translate source documents.
    Translate(TranslateArgs),
    /// Predict ZP labels for source documents.
    Label(LabelArgs),
    /// Corpus BLEU of a hypothesis file.
    EvalBleu(EvalBleuArgs),
    /// ZP precision/recall/F1 against gold labels.
    EvalZp(EvalZpArgs),
    /// Paired sign test between two systems on sentence BLEU.
    SigTest(SigTestArgs),
    /// Train and compare the baseline, reconstruction, joint and discourse rows.
    Ablation(AblationArgs),
    /// Print parameter counts of a model or statistics of a corpus split.
    Describe(DescribeArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    /// key=value generator settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of training documents.
    #[arg(long)]
    documents: Option<usize>,
}

#[derive(Args)]
struct AnnotateArgs {
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    tgt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Gold alignments, one line per sentence; IBM Model 1 is trained otherwise.
    #[arg(long)]
    align: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    ibm1_iters: usize,
    /// Source-side text with pronouns present, for the language model.
    #[arg(long)]
    lm_text: PathBuf,
    /// Pronoun inventory (source<TAB>targets); the synthetic one by default.
    #[arg(long)]
    pronouns: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// key=value model and training settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    train_dir: PathBuf,
    #[arg(long)]
    valid_dir: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// baseline | reconstruction | joint | discourse
    #[arg(long)]
    preset: Option<String>,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    rescore_beta: Option<f64>,
    #[arg(long)]
    max_ratio: Option<f64>,
}

impl DecodeArgs {
    fn config(&self) -> DecodeConfig {
        let d = DecodeConfig::default();
        DecodeConfig {
            beam: self.beam.unwrap_or(d.beam),
            beta: self.rescore_beta.unwrap_or(d.beta),
            max_ratio: self.max_ratio.unwrap_or(d.max_ratio),
        }
    }
}

#[derive(Args)]
struct TranslateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    decode: DecodeArgs,
    /// Also write predicted ZP labels here.
    #[arg(long)]
    emit_labels: Option<PathBuf>,
}

#[derive(Args)]
struct LabelArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    decode: DecodeArgs,
}

#[derive(Args)]
struct EvalBleuArgs {
    #[arg(long)]
    hyp: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
}

#[derive(Args)]
struct EvalZpArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gold: PathBuf,
}

#[derive(Args)]
struct SigTestArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
}

#[derive(Args)]
struct AblationArgs {
    /// Directory with train/, valid/ and test/ splits.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[command(flatten)]
    decode: DecodeArgs,
}

#[derive(Args)]
struct DescribeArgs {
    #[arg(long, conflicts_with = "corpus")]
    model: Option<PathBuf>,
    /// A split directory written by gen-corpus.
    #[arg(long)]
    corpus: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            if matches!(e, Error::Usage(_)) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let threads = cli.threads.max(1);
    match cli.command {
        Command::GenCorpus(a) => gen_corpus(a),
        Command::Annotate(a) => annotate(a),
        Command::Train(a) => train_cmd(a, threads),
        Command::Translate(a) => translate_cmd(a, threads),
        Command::Label(a) => label_cmd(a, threads),
        Command::EvalBleu(a) => eval_bleu(a),
        Command::EvalZp(a) => eval_zp(a),
        Command::SigTest(a) => sig_test(a),
        Command::Ablation(a) => ablation(a, threads),
        Command::Describe(a) => describe(a),
    }
}

fn load_kv(path: Option<&Path>) -> Result<KeyValues> {
    path.map_or_else(|| Ok(KeyValues::new()), KeyValues::load)
}

fn log_config(cmd: &str, kv: &KeyValues) {
    info!("{cmd}: resolved config");
    for (k, v) in kv.iter() {
        info!("  {k}={v}");
    }
}

/// Writes `<path>.meta` naming the tool version and the config hash.
fn write_meta(path: &Path, config: &KeyValues) -> Result<()> {
    let mut meta = KeyValues::new();
    meta.set("tool", "zpmt");
    meta.set("version", VERSION);
    meta.set("config_hash", config.hash());
    let mut name = path.as_os_str().to_owned();
    name.push(".meta");
    meta.save(Path::new(&name))
}

fn gen_corpus(a: GenArgs) -> Result<()> {
    let file = load_kv(a.config.as_deref())?;
    let mut cfg = GenConfig::from_kv(&file)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.documents {
        cfg.num_documents = n;
    }
    cfg.validate()?;
    let kv = cfg.to_kv();
    log_config("gen-corpus", &kv);
    let splits = synth::generate_splits(&cfg)?;
    fs::create_dir_all(&a.out)?;
    for (name, corpus) in synth::SPLITS.iter().zip(&splits) {
        let dir = a.out.join(name);
        let stats = synth::write_corpus(&dir, corpus)?;
        for f in [
            synth::SRC_FILE,
            synth::TGT_FILE,
            synth::LABEL_FILE,
            synth::ALIGN_FILE,
            synth::FULL_FILE,
            synth::GOLD_FILE,
        ] {
            write_meta(&dir.join(f), &kv)?;
        }
        println!("{name}: {}", synth::describe_stats(&stats));
    }
    let cfg_path = a.out.join("gen.cfg");
    kv.save(&cfg_path)?;
    write_meta(&cfg_path, &kv)
}

fn pronoun_vocab(path: Option<&Path>) -> Result<PronounVocab> {
    match path {
        Some(p) => PronounVocab::load(p),
        None => Ok(synth::pronoun_vocab()),
    }
}

fn annotate(a: AnnotateArgs) -> Result<()> {
    let pronouns = pronoun_vocab(a.pronouns.as_deref())?;
    let docs = load_documents(&a.src, &a.tgt, None)?;
    let lm_text: Vec<Vec<String>> = read_blocks(&a.lm_text)?
        .into_iter()
        .flatten()
        .map(|l| l.1)
        .collect();
    let lm = NGramLm::train(&lm_text, &DEFAULT_LAMBDAS, DEFAULT_FLOOR)?;
    let mut kv = KeyValues::new();
    kv.set("src", a.src.display());
    kv.set("tgt", a.tgt.display());
    kv.set("lm_text", a.lm_text.display());
    let (annotated, summary) = match &a.align {
        Some(p) => {
            kv.set("align", p.display());
            log_config("annotate", &kv);
            let gold = read_alignments(p)?;
            annotate_corpus(&docs, Alignments::Gold(&gold), &lm, &pronouns)?
        }
        None => {
            kv.set("ibm1_iters", a.ibm1_iters);
            log_config("annotate", &kv);
            let pairs: Vec<(Vec<String>, Vec<String>)> = docs
                .iter()
                .flat_map(|d| d.src.iter().cloned().zip(d.tgt.iter().cloned()))
                .collect();
            let (table, ll) = train_ibm1(&pairs, a.ibm1_iters)?;
            for (i, l) in ll.iter().enumerate() {
                info!("ibm1 iteration {} log-likelihood {l:.4}", i + 1);
            }
            annotate_corpus(&docs, Alignments::Table(&table), &lm, &pronouns)?
        }
    };
    let labels: Vec<Vec<ZpLabelSequence>> = annotated
        .into_iter()
        .map(|d| d.labels.unwrap_or_default())
        .collect();
    write_labels(&a.out, &labels)?;
    write_meta(&a.out, &kv)?;
    println!("sentences={}", summary.sentences);
    println!("touched={}", summary.touched);
    println!("zps={}", summary.zps);
    println!("skipped={}", summary.skipped);
    println!("zp_rate={:.6}", summary.zp_rate());
    Ok(())
}

/// Reads a split: source, target, and labels when the file exists.
fn load_split(dir: &Path, labels: &LabelSet) -> Result<Vec<Document>> {
    let lab = dir.join(synth::LABEL_FILE);
    let lab = lab.exists().then_some((lab.as_path(), labels));
    load_documents(&dir.join(synth::SRC_FILE), &dir.join(synth::TGT_FILE), lab)
}

fn split_labels(dir: &Path) -> Result<LabelSet> {
    let p = dir.join(synth::PRONOUN_FILE);
    Ok(pronoun_vocab(p.exists().then_some(p.as_path()))?.label_set())
}

/// Splits a key=value file into model and training settings.
fn model_and_train(
    file: &KeyValues,
    preset: Option<&str>,
    seed: Option<u64>,
    epochs: Option<usize>,
) -> Result<(ModelConfig, TrainConfig)> {
    let known: Vec<&str> = MODEL_KEYS
        .iter()
        .chain(TRAIN_KEYS.iter())
        .copied()
        .collect();
    file.reject_unknown(&known)?;
    let mut model = ModelConfig::default().apply(file)?;
    if let Some(p) = preset {
        let mut kv = KeyValues::new();
        kv.set("preset", p);
        model = model.apply(&kv)?.apply(&strip_preset(file))?;
    }
    let mut tc = TrainConfig::default().apply(file)?;
    if let Some(s) = seed {
        tc.seed = s;
    }
    if let Some(e) = epochs {
        tc.epochs = e;
    }
    tc.validate()?;
    Ok((model, tc))
}

fn strip_preset(kv: &KeyValues) -> KeyValues {
    let mut out = KeyValues::new();
    for (k, v) in kv.iter().filter(|(k, _)| *k != "preset") {
        out.set(k, v);
    }
    out
}

fn train_cmd(a: TrainArgs, threads: usize) -> Result<()> {
    let file = load_kv(a.config.as_deref())?;
    let (mc, tc) = model_and_train(&file, a.preset.as_deref(), a.seed, a.epochs)?;
    let labels = split_labels(&a.train_dir)?;
    let train_docs = load_split(&a.train_dir, &labels)?;
    let valid_docs = load_split(&a.valid_dir, &labels)?;
    let data = Dataset::new(
        &train_docs,
        &valid_docs,
        None,
        labels,
        mc.window(),
        tc.vocab_size,
    )?;
    let mc = data.model_config(&mc);
    mc.validate()?;
    let mut resolved = mc.to_kv();
    resolved.merge(&tc.to_kv());
    resolved.set("train_dir", a.train_dir.display());
    resolved.set("valid_dir", a.valid_dir.display());
    log_config("train", &resolved);
    fs::create_dir_all(&a.out)?;
    let cfg_path = a.out.join("run.cfg");
    resolved.save(&cfg_path)?;
    write_meta(&cfg_path, &resolved)?;

    let mut model = Model::new(mc, tc.seed)?;
    info!("{} parameters", model.store.count(None));
    let outcome = train(
        &mut model,
        &data.train,
        &data.valid,
        &data.tgt_vocab,
        &data.labels,
        &tc,
        threads,
        |_| {},
    )?;
    let log_path = a.out.join("epochs.tsv");
    fs::write(&log_path, format_log(&outcome.log))?;
    write_meta(&log_path, &resolved)?;
    data.bundle(model).save(&a.out)?;
    write_meta(&a.out.join(zpmt::model::PARAMS_FILE), &resolved)?;
    println!("best_epoch={}", outcome.best_epoch);
    println!("valid_bleu={:.2}", outcome.best_bleu);
    Ok(())
}

struct Decoded {
    translations: Vec<Vec<Vec<String>>>,
    labels: Option<Vec<Vec<ZpLabelSequence>>>,
}

fn decode_docs(
    bundle: &ModelBundle,
    src: &Path,
    cfg: &DecodeConfig,
    threads: usize,
) -> Result<Decoded> {
    let docs = load_source_documents(src)?;
    let srcs = sources(&docs, &bundle.src_vocab, bundle.model.config.window());
    let out = translate_all(&bundle.model, &srcs, cfg, threads)?;
    let mut it = out.into_iter();
    let mut translations = Vec::with_capacity(docs.len());
    let mut labels = bundle.model.has_labeler().then(Vec::new);
    for d in &docs {
        let mut tr = Vec::with_capacity(d.len());
        let mut lb = Vec::with_capacity(d.len());
        for _ in 0..d.len() {
            let t = it.next().expect("one translation per sentence");
            tr.push(bundle.tgt_vocab.decode_sentence(t.best.words()));
            if let Some(l) = &t.labels {
                lb.push(ZpLabelSequence::from_ids(l, &bundle.labels));
            }
        }
        translations.push(tr);
        if let Some(all) = labels.as_mut() {
            all.push(lb);
        }
    }
    Ok(Decoded {
        translations,
        labels,
    })
}

fn decode_kv(model: &Path, src: &Path, cfg: &DecodeConfig) -> KeyValues {
    let mut kv = KeyValues::new();
    kv.set("model", model.display());
    kv.set("src", src.display());
    kv.set("beam", cfg.beam);
    kv.set("rescore_beta", cfg.beta);
    kv.set("max_ratio", cfg.max_ratio);
    kv
}

fn translate_cmd(a: TranslateArgs, threads: usize) -> Result<()> {
    let cfg = a.decode.config();
    cfg.validate()?;
    let kv = decode_kv(&a.model, &a.src, &cfg);
    log_config("translate", &kv);
    let bundle = ModelBundle::load(&a.model)?;
    let out = decode_docs(&bundle, &a.src, &cfg, threads)?;
    write_blocks(&a.out, out.translations.iter().map(|d| d.iter()))?;
    write_meta(&a.out, &kv)?;
    if let Some(path) = &a.emit_labels {
        let labels = out
            .labels
            .ok_or_else(|| Error::Usage("--emit-labels needs a model with a ZP labeler".into()))?;
        write_labels(path, &labels)?;
        write_meta(path, &kv)?;
    }
    Ok(())
}

fn label_cmd(a: LabelArgs, threads: usize) -> Result<()> {
    let cfg = a.decode.config();
    cfg.validate()?;
    let kv = decode_kv(&a.model, &a.src, &cfg);
    log_config("label", &kv);
    let bundle = ModelBundle::load(&a.model)?;
    if !bundle.model.has_labeler() {
        return Err(Error::Usage("label needs a model with a ZP labeler".into()));
    }
    let out = decode_docs(&bundle, &a.src, &cfg, threads)?;
    write_labels(&a.out, &out.labels.expect("labeler present"))?;
    write_meta(&a.out, &kv)
}

type Lines = Vec<Vec<String>>;

/// Hypothesis/reference lines aligned one-to-one; lines blank in the
/// reference are document separators and must be blank in the hypothesis.
fn aligned_lines(hyp: &Path, reference: &Path) -> Result<(Lines, Lines)> {
    let h = fs::read_to_string(hyp)?;
    let r = fs::read_to_string(reference)?;
    let (h, r): (Vec<&str>, Vec<&str>) = (h.lines().collect(), r.lines().collect());
    if h.len() != r.len() {
        return Err(Error::format(
            hyp.display().to_string(),
            0,
            format!("{} lines but the reference has {}", h.len(), r.len()),
        ));
    }
    let mut hs = Vec::new();
    let mut rs = Vec::new();
    for (i, (a, b)) in h.iter().zip(&r).enumerate() {
        if b.trim().is_empty() {
            if !a.trim().is_empty() {
                return Err(Error::format(
                    hyp.display().to_string(),
                    i + 1,
                    "text where the reference has a document break",
                ));
            }
            continue;
        }
        hs.push(a.split_whitespace().map(String::from).collect());
        rs.push(b.split_whitespace().map(String::from).collect());
    }
    Ok((hs, rs))
}

fn eval_bleu(a: EvalBleuArgs) -> Result<()> {
    let (h, r) = aligned_lines(&a.hyp, &a.reference)?;
    let b = bleu(&h, &r)?;
    println!("bleu={:.2}", b.score);
    for n in 1..=4 {
        println!("p{n}={:.4}", b.precision(n));
    }
    println!("bp={:.4}", b.brevity_penalty);
    println!("hyp_len={}", b.hyp_len);
    println!("ref_len={}", b.ref_len);
    Ok(())
}

fn read_label_lines(path: &Path) -> Result<Vec<ZpLabelSequence>> {
    Ok(read_blocks(path)?
        .into_iter()
        .flatten()
        .map(|(_, toks)| ZpLabelSequence(toks))
        .collect())
}

fn eval_zp(a: EvalZpArgs) -> Result<()> {
    let s = zp_prf(&read_label_lines(&a.pred)?, &read_label_lines(&a.gold)?)?;
    for (name, p) in [("position", s.position), ("word", s.word)] {
        println!("{name}.precision={:.4}", p.precision);
        println!("{name}.recall={:.4}", p.recall);
        println!("{name}.f1={:.4}", p.f1);
    }
    println!("gold={}", s.word.gold);
    println!("predicted={}", s.word.predicted);
    Ok(())
}

fn sig_test(a: SigTestArgs) -> Result<()> {
    let (ha, r) = aligned_lines(&a.a, &a.reference)?;
    let (hb, _) = aligned_lines(&a.b, &a.reference)?;
    let sa: Vec<f64> = ha
        .iter()
        .zip(&r)
        .map(|(h, r)| sentence_bleu(h, r))
        .collect();
    let sb: Vec<f64> = hb
        .iter()
        .zip(&r)
        .map(|(h, r)| sentence_bleu(h, r))
        .collect();
    let t = sign_test(&sa, &sb)?;
    println!("bleu_a={:.2}", bleu(&ha, &r)?.score);
    println!("bleu_b={:.2}", bleu(&hb, &r)?.score);
    println!("wins={}", t.wins);
    println!("losses={}", t.losses);
    println!("ties={}", t.ties);
    println!("p_value={:.6}", t.p_value);
    Ok(())
}

fn ablation(a: AblationArgs, threads: usize) -> Result<()> {
    let file = load_kv(a.config.as_deref())?;
    let (mc, tc) = model_and_train(&file, None, a.seed, a.epochs)?;
    let mut dc = a.decode.config();
    if a.decode.rescore_beta.is_none() {
        dc.beta = 1.0;
    }
    dc.validate()?;
    let labels = split_labels(&a.data.join("train"))?;
    let tr = load_split(&a.data.join("train"), &labels)?;
    let va = load_split(&a.data.join("valid"), &labels)?;
    let te = load_split(&a.data.join("test"), &labels)?;
    let data = Dataset::new(&tr, &va, Some(&te), labels, mc.k, tc.vocab_size)?;
    let mut resolved = mc.to_kv();
    resolved.merge(&tc.to_kv());
    resolved.set("beam", dc.beam);
    resolved.set("rescore_beta", dc.beta);
    log_config("ablation", &resolved);
    let rows = ablation_matrix(&data, &mc, &tc, &dc, threads)?;
    let table = format_ablation(&rows);
    print!("{table}");
    fs::write(&a.out, &table)?;
    write_meta(&a.out, &resolved)
}

fn describe(a: DescribeArgs) -> Result<()> {
    match (a.model, a.corpus) {
        (Some(m), _) => {
            let bundle = ModelBundle::load(&m)?;
            print!("{}", bundle.model.config.to_kv());
            print!("{}", bundle.model.describe());
        }
        (None, Some(c)) => {
            let corpus = synth::read_corpus(&c)?;
            let stats = synth::corpus_stats(&corpus.docs, Some(&corpus.pronouns))?;
            print!("{}", stats.to_kv());
        }
        (None, None) => return Err(Error::Usage("describe needs --model or --corpus".into())),
    }
    Ok(())
}
