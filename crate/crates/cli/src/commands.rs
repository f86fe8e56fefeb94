use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use res2ctx::autodiff::OpTag;
use res2ctx::checkpoint;
use res2ctx::data::{self, Corpus, ManifestCorpus, Pipeline, PipelineConfig, SynthCorpus};
use res2ctx::evaluation::{self as ev, CohortSet, EmbeddingTable};
use res2ctx::gradcheck;
use res2ctx::model::{reference_param_count, Model};
use res2ctx::training::{self, TrainOutputs};
use res2ctx::{Error, Result};

use crate::config::RunConfig;
use crate::Common;

fn invalid(msg: impl Into<String>) -> Error {
    Error::Invalid(msg.into())
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(v) = common.variant {
        cfg.variant = v;
    }
    if let Some(w) = common.width {
        cfg.width = w;
    }
    Ok(cfg)
}

fn required(flag: Option<PathBuf>, cfg: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    flag.or_else(|| cfg.clone())
        .ok_or_else(|| invalid(format!("no {what} given (flag --{what} or config key)")))
}

fn out_path(common: &Common, cmd: &str) -> Result<PathBuf> {
    common.out.clone().ok_or_else(|| invalid(format!("{cmd} needs --out")))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn gradcheck(common: &Common, fault: Option<&str>) -> Result<ExitCode> {
    let fault = fault
        .map(|f| OpTag::parse(f).ok_or_else(|| invalid(format!("unknown op family {f:?}"))))
        .transpose()?;
    let rows = gradcheck::standard_suite(fault)?;
    let mut report = String::from("level\tcheck\trel_err\tthreshold\tstatus\n");
    for r in &rows {
        let status = if r.result.passed() { "ok" } else { "FAIL" };
        let _ = writeln!(
            report,
            "{}\t{}\t{:.3e}\t{:.0e}\t{}",
            r.level.as_str(),
            r.result.name,
            r.result.rel_err,
            r.result.threshold,
            status
        );
    }
    print!("{report}");
    if let Some(p) = &common.out {
        write_file(p, &report)?;
    }
    let failed = rows.iter().filter(|r| !r.result.passed()).count();
    if failed > 0 {
        eprintln!("{failed} of {} gradient checks failed", rows.len());
        return Ok(ExitCode::from(2));
    }
    eprintln!("all {} gradient checks passed", rows.len());
    Ok(ExitCode::SUCCESS)
}

pub fn paramcount(common: &Common) -> Result<ExitCode> {
    let cfg = resolve(common)?;
    let m = cfg.model_config(2)?;
    let count = m.param_count(false);
    println!("variant\t{}", m.variant);
    println!("width\t{}", m.width);
    println!("params\t{count}");
    if m.width == 1024 {
        let target = reference_param_count(m.variant);
        println!("target\t{target}");
        println!("deviation_pct\t{:.2}", 100.0 * (count as f64 - target) / target);
    }
    Ok(ExitCode::SUCCESS)
}

pub fn train(common: &Common, manifest: Option<PathBuf>) -> Result<ExitCode> {
    let mut cfg = resolve(common)?;
    let manifest = required(manifest, &cfg.train_manifest, "manifest")?;
    cfg.train_manifest = Some(manifest.clone());
    let out = out_path(common, "train")?;
    let corpus = ManifestCorpus::open(&manifest)?;
    let mcfg = cfg.model_config(corpus.num_speakers())?;
    let tcfg = cfg.train_config(data::workers_from_env())?;
    create_dir(&out)?;
    write_file(&out.join("run.cfg"), &cfg.serialize())?;
    let mut model = Model::build(&mcfg, cfg.seed)?;
    eprintln!(
        "training {} (width {}, {} params) on {} items from {} speakers for {} steps",
        mcfg.variant,
        mcfg.width,
        model.param_count(false),
        corpus.len(),
        corpus.num_speakers(),
        tcfg.steps
    );
    let every = (tcfg.steps / 20).max(1);
    let outputs = TrainOutputs {
        checkpoint: Some(out.join("model.ckpt")),
        log: Some(out.join("train_log.tsv")),
    };
    let records = training::train(&mut model, &corpus, &tcfg, &outputs, |r| {
        if r.step % every == 0 || r.step + 1 == tcfg.steps {
            eprintln!("step {:>6}  lr {:.3e}  loss {:.4}", r.step, r.lr, r.loss);
        }
    })?;
    if let Some(last) = records.last() {
        println!("final_loss\t{}", last.loss);
    }
    println!("checkpoint\t{}", out.join("model.ckpt").display());
    Ok(ExitCode::SUCCESS)
}

pub fn embed(common: &Common, manifest: Option<PathBuf>, ckpt: Option<PathBuf>) -> Result<ExitCode> {
    let cfg = resolve(common)?;
    let manifest = required(manifest, &cfg.embed_manifest, "manifest")?;
    let ckpt = required(ckpt, &cfg.checkpoint, "checkpoint")?;
    let out = out_path(common, "embed")?;
    let model = checkpoint::load(&ckpt)?;
    let corpus = ManifestCorpus::open(&manifest)?;
    let workers = data::workers_from_env();
    let pipeline = Pipeline::new(
        PipelineConfig {
            augment: None,
            specaugment: None,
            ..cfg.pipeline()
        },
        workers,
    )?;
    let table = ev::extract_embeddings(&model, &corpus, &pipeline, workers)?;
    table.write(&out)?;
    eprintln!("wrote {} embeddings of dimension {} to {}", table.len(), table.dim(), out.display());
    Ok(ExitCode::SUCCESS)
}

pub fn score(
    common: &Common,
    embeddings: Option<PathBuf>,
    trials: Option<PathBuf>,
    asnorm: bool,
    cohort: Option<PathBuf>,
    top_k: Option<usize>,
) -> Result<ExitCode> {
    let cfg = resolve(common)?;
    let embeddings = required(embeddings, &cfg.embeddings, "embeddings")?;
    let trials = required(trials, &cfg.trials, "trials")?;
    let out = out_path(common, "score")?;
    let table = EmbeddingTable::read(&embeddings)?;
    let trial_list = ev::read_trials(&trials)?;
    let cohort = if asnorm || cfg.asnorm {
        let path = required(cohort, &cfg.cohort, "cohort")?;
        let k = top_k.unwrap_or(cfg.asnorm_k);
        Some(CohortSet::from_table(&EmbeddingTable::read(&path)?, k)?)
    } else {
        None
    };
    let set = ev::score_trials(&trial_list, &table, cohort.as_ref())?;
    ev::write_scores(&out, &set.scores)?;
    if let Some(c) = &cohort {
        eprintln!("AS-norm with {} cohort embeddings, top-K {}", c.len(), c.k());
        if set.degenerate > 0 {
            eprintln!("{} trials hit the cohort deviation floor", set.degenerate);
        }
    }
    eprintln!("wrote {} scores to {}", set.scores.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

pub fn eval(common: &Common, trials: Option<PathBuf>, scores: Option<PathBuf>, det: Option<PathBuf>) -> Result<ExitCode> {
    let cfg = resolve(common)?;
    let trials = required(trials, &cfg.trials, "trials")?;
    let scores = required(scores, &cfg.scores, "scores")?;
    let dcf = cfg.dcf()?;
    let (s, l) = ev::label_scores(&ev::read_trials(&trials)?, &ev::read_scores(&scores)?)?;
    let m = ev::evaluate(&s, &l, &dcf)?;
    println!("trials\t{}", m.trials);
    println!("eer\t{}", m.eer);
    println!("min_dcf\t{}", m.min_dcf);
    if let Some(p) = &common.out {
        ev::write_metrics(p, &m, &dcf)?;
    }
    if let Some(p) = det {
        ev::write_det(p, &ev::det_curve(&s, &l)?)?;
    }
    Ok(ExitCode::SUCCESS)
}

pub fn synth(common: &Common, speakers: usize, utts: usize, held_out: usize) -> Result<ExitCode> {
    let cfg = resolve(common)?;
    let out = out_path(common, "synth")?;
    if held_out < 2 || held_out >= utts {
        return Err(invalid(format!("held-out count must be in 2..{utts}, got {held_out}")));
    }
    let corpus = SynthCorpus::new(speakers, utts, cfg.seed)?;
    let wav_dir = out.join("wav");
    corpus.write_to_dir(&wav_dir)?;
    let (train, test) = data::split_per_speaker(&corpus, held_out);
    let entries = |items: &[usize]| -> Vec<(String, String)> {
        items
            .iter()
            .map(|&i| (format!("wav/{}.wav", corpus.item_id(i)), format!("spk{:03}", corpus.speaker(i))))
            .collect()
    };
    data::write_manifest(out.join("train.tsv"), &entries(&train))?;
    data::write_manifest(out.join("test.tsv"), &entries(&test))?;
    let ids: Vec<String> = test.iter().map(|&i| corpus.item_id(i)).collect();
    let spk: Vec<usize> = test.iter().map(|&i| corpus.speaker(i)).collect();
    let trials = ev::all_pairs_trials(&ids, &spk);
    ev::write_trials(out.join("trials.txt"), &trials)?;
    eprintln!(
        "wrote {} utterances ({} train, {} test) and {} trials to {}",
        corpus.len(),
        train.len(),
        test.len(),
        trials.len(),
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

pub fn show_config(common: &Common) -> Result<ExitCode> {
    let text = resolve(common)?.serialize();
    print!("{text}");
    if let Some(p) = &common.out {
        write_file(p, &text)?;
    }
    Ok(ExitCode::SUCCESS)
}
