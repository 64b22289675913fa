use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::info;
use ppvae_core::checkpoint::{self, BetaSchedule, PluginMeta};
use ppvae_core::classifier::{train_condition_classifier, ClassifierConfig};
use ppvae_core::corpus::{label_samples, read_labeled, read_unlabeled};
use ppvae_core::evaluation::{evaluate, Task};
use ppvae_core::generation::{to_jsonl, to_lines, GeneratedSample, GenerationRequest, Generator, UNCONDITIONAL};
use ppvae_core::par::Exec;
use ppvae_core::pipeline::{self, ConditionSampling};
use ppvae_core::plugin::PluginConfig;
use ppvae_core::pretrain::PretrainConfig;
use ppvae_core::synthetic::{self, SyntheticConfig};

use crate::config::{overlay, set, FileConfig, GenerateConfig, SamplingConfig};
use crate::{Cli, CliError, Command, EvaluateArgs, GenerateArgs, PretrainArgs, SyntheticArgs, TrainPluginArgs};

pub fn run(cli: Cli) -> Result<(), CliError> {
    let file = FileConfig::load(cli.config.as_deref())?;
    let root = file.root(cli.root.as_deref());
    let exec = if cli.sequential { Exec::Sequential } else { Exec::default() };
    match cli.command {
        Command::Pretrain(a) => pretrain(&file, &root, a),
        Command::TrainPlugin(a) => train_plugin(&file, &root, exec, a),
        Command::Generate(a) => generate(&file, &root, exec, a),
        Command::Evaluate(a) => evaluate_cmd(&file, a),
        Command::MakeSynthetic(a) => make_synthetic(a),
    }
}

fn preset(name: Option<&str>) -> Result<PretrainConfig, CliError> {
    match name.unwrap_or("full") {
        "full" => Ok(PretrainConfig::default()),
        "small" => Ok(PretrainConfig::small()),
        other => Err(CliError::Usage(format!("unknown preset {other:?} (expected full or small)"))),
    }
}

fn pretrain(file: &FileConfig, root: &Path, a: PretrainArgs) -> Result<(), CliError> {
    let base = preset(a.preset.as_deref().or(file.preset.as_deref()))?;
    let mut cfg = overlay(base, file.pretrain.as_ref(), "pretrain")?;
    set(&mut cfg.d_g, a.d_g);
    set(&mut cfg.emb_dim, a.emb_dim);
    set(&mut cfg.gru_hidden, a.gru_hidden);
    set(&mut cfg.dec_layers, a.dec_layers);
    set(&mut cfg.dec_heads, a.dec_heads);
    set(&mut cfg.ffn_dim, a.ffn_dim);
    set(&mut cfg.disc_hidden, a.disc_hidden);
    set(&mut cfg.lambda_coeff, a.lambda);
    set(&mut cfg.batch, a.batch);
    set(&mut cfg.lr, a.lr);
    set(&mut cfg.epochs, a.epochs);
    set(&mut cfg.max_steps, a.max_steps);
    set(&mut cfg.max_vocab, a.max_vocab);
    set(&mut cfg.max_len, a.max_len);
    set(&mut cfg.seed, a.seed);
    cfg.validate()?;
    let out = a.out.unwrap_or_else(|| root.join("pretrain"));

    let corpus = read_unlabeled(&a.corpus, cfg.max_len)?;
    let total = pipeline::pretrain_steps(&cfg, corpus.len());
    info!("pretraining on {} sentences for {total} steps", corpus.len());
    let run = pipeline::run_pretrain(&corpus, &cfg, |i, l| {
        if i % 100 == 0 || i + 1 == total {
            info!("step {i}: recon {:.3} adv {:.4} critic {:.4}", l.recon, l.adversarial, l.disc);
        }
    })?;
    let digest = checkpoint::save_pretrain(&out, &run.model, &run.vocab)?;
    info!("wrote {} (digest {digest})", out.display());
    Ok(())
}

fn train_plugin(file: &FileConfig, root: &Path, exec: Exec, a: TrainPluginArgs) -> Result<(), CliError> {
    let mut cfg = overlay(PluginConfig::default(), file.plugin.as_ref(), "plugin")?;
    set(&mut cfg.gamma, a.gamma);
    set(&mut cfg.beta_max, a.beta_max);
    set(&mut cfg.beta_warmup_iters, a.beta_warmup);
    set(&mut cfg.total_iters, a.iters);
    set(&mut cfg.batch, a.batch);
    set(&mut cfg.lr, a.lr);
    set(&mut cfg.d_c, a.d_c);
    set(&mut cfg.seed, a.seed);
    if a.neg_clamp.is_some() {
        cfg.neg_clamp = a.neg_clamp;
    }
    if a.beta_warmup.is_none() && a.iters.is_some() && cfg.beta_warmup_iters > cfg.total_iters {
        return Err(CliError::Usage("--iters is below the warmup length; pass --beta-warmup too".into()));
    }
    cfg.validate()?;
    let mut sampling = overlay(SamplingConfig::default(), file.sampling.as_ref(), "sampling")?;
    set(&mut sampling.n_per_condition, a.n_per_condition);
    if a.no_negatives {
        sampling.use_negatives = false;
    } else if a.use_negatives {
        sampling.use_negatives = true;
    }
    sampling.balance_negatives |= a.balance_negatives;
    let mut conditions = a.conditions.clone();
    conditions.dedup();
    if let Some(bad) = conditions.iter().find(|c| c.is_empty() || c.contains(['/', '\\']) || c.as_str() == UNCONDITIONAL) {
        return Err(CliError::Usage(format!("invalid condition name {bad:?}")));
    }

    let pre_dir = a.pretrain.unwrap_or_else(|| root.join("pretrain"));
    let pre = checkpoint::load_pretrain(&pre_dir)?;
    let rows = read_labeled(&a.labeled, pre.model.config.max_len)?;
    let labeled = label_samples(&rows, &pre.vocab, pre.model.config.max_len);
    let opts = ConditionSampling {
        n_per_condition: sampling.n_per_condition,
        use_negatives: sampling.use_negatives,
        balance_negatives: sampling.balance_negatives,
        seed: cfg.seed,
    };
    let datasets = conditions
        .iter()
        .map(|c| pipeline::encode_condition(&pre.model, &labeled, c, &opts, exec))
        .collect::<Result<Vec<_>, _>>()?;
    for d in &datasets {
        let negs = d.negatives.as_ref().map_or(0, |n| n.rows());
        info!("{}: {} positives, {negs} negatives", d.name, d.positives.rows());
    }
    info!("training {} plugin(s) for {} iterations", datasets.len(), cfg.total_iters);
    let trained = pipeline::train_plugins(&datasets, &cfg, exec)?;
    let out = a.out.unwrap_or_else(|| root.join("plugins"));
    for (ds, t) in datasets.iter().zip(&trained) {
        let meta = PluginMeta {
            condition: ds.name.clone(),
            gamma: cfg.gamma,
            beta_schedule: BetaSchedule { beta_max: cfg.beta_max, warmup_iters: cfg.beta_warmup_iters },
            iterations: cfg.total_iters,
            negatives: ds.negatives.is_some(),
            pretrain_digest: pre.digest.clone(),
        };
        let dir = out.join(&ds.name);
        checkpoint::save_plugin(&dir, &t.model, &meta, &pre.vocab)?;
        info!("wrote {} (final loss {:.4})", dir.display(), t.trace.last().copied().unwrap_or(f64::NAN));
    }
    Ok(())
}

fn generate(file: &FileConfig, root: &Path, exec: Exec, a: GenerateArgs) -> Result<(), CliError> {
    let mut cfg = overlay(GenerateConfig::default(), file.generate.as_ref(), "generate")?;
    set(&mut cfg.n, a.n);
    set(&mut cfg.seed, a.seed);
    set(&mut cfg.max_len, a.max_len);
    let mut dirs = a.plugins.clone();
    dirs.extend(a.conditions.iter().map(|c| root.join("plugins").join(c)));
    if dirs.is_empty() && !a.unconditional {
        return Err(CliError::Usage("pass --plugin, --condition or --unconditional".into()));
    }
    let pre_dir = a.pretrain.unwrap_or_else(|| root.join("pretrain"));
    let pre = checkpoint::load_pretrain(&pre_dir)?;
    let gen = Generator { model: &pre.model, vocab: &pre.vocab, digest: &pre.digest, exec };

    let mut batches: Vec<(String, Vec<String>)> = Vec::new();
    if a.unconditional {
        batches.push((UNCONDITIONAL.to_string(), gen.unconditional_generate(cfg.n, cfg.seed, cfg.max_len)?));
    }
    for dir in &dirs {
        let plugin = checkpoint::load_plugin(dir, &pre.digest)?;
        let req = GenerationRequest { condition: plugin.meta.condition.clone(), n: cfg.n, seed: cfg.seed, max_len: cfg.max_len };
        batches.push((req.condition.clone(), gen.plugin_generate(&plugin, &req)?));
    }
    let mut text = String::new();
    for (cond, texts) in &batches {
        text.push_str(&if a.jsonl { to_jsonl(cond, texts)? } else { to_lines(texts) });
    }
    match a.out {
        Some(p) => write_file(&p, &text)?,
        None => stdout(&text)?,
    }
    Ok(())
}

/// Writes to stdout; a closed pipe (e.g. `| head`) is not an error.
fn stdout(text: &str) -> Result<(), CliError> {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|()| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text)?;
    Ok(())
}

/// Groups texts by condition from JSON-lines files or `COND=PATH` plain files.
fn read_inputs(inputs: &[String]) -> Result<BTreeMap<String, Vec<String>>, CliError> {
    let mut out: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for spec in inputs {
        match spec.split_once('=') {
            Some((cond, path)) => {
                let text = fs::read_to_string(path)?;
                out.entry(cond.to_string()).or_default().extend(text.lines().map(str::to_string));
            }
            None => {
                let text = fs::read_to_string(spec)?;
                for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                    let s: GeneratedSample = serde_json::from_str(line)
                        .map_err(|e| CliError::Usage(format!("{spec}:{}: not a generate JSON line ({e})", n + 1)))?;
                    out.entry(s.condition).or_default().push(s.text);
                }
            }
        }
    }
    out.remove(UNCONDITIONAL);
    Ok(out)
}

fn evaluate_cmd(file: &FileConfig, a: EvaluateArgs) -> Result<(), CliError> {
    let generated = read_inputs(&a.inputs)?;
    let report = match a.task.as_str() {
        "length" => evaluate(&generated, &Task::Length)?,
        "classifier" => {
            let labeled = a.labeled.as_ref().ok_or_else(|| CliError::Usage("--task classifier needs --labeled".into()))?;
            let mut cfg = overlay(ClassifierConfig::default(), file.classifier.as_ref(), "classifier")?;
            set(&mut cfg.seed, a.seed);
            let rows: Vec<(String, String)> =
                read_labeled(labeled, usize::MAX)?.into_iter().map(|(l, t)| (l, t.join(" "))).collect();
            let clf = train_condition_classifier(&rows, &cfg)?;
            if let Some(acc) = clf.validation_accuracy {
                info!("classifier validation accuracy {acc:.4}");
            }
            evaluate(&generated, &Task::Classifier(&clf))?
        }
        other => return Err(CliError::Usage(format!("unknown task {other:?} (expected length or classifier)"))),
    };
    let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::Runtime(e.into()))?;
    stdout(&report.table())?;
    match a.out {
        Some(p) => write_file(&p, &format!("{json}\n"))?,
        None => stdout(&format!("{json}\n"))?,
    }
    Ok(())
}

fn make_synthetic(a: SyntheticArgs) -> Result<(), CliError> {
    let cfg = SyntheticConfig { unlabeled: a.unlabeled, per_condition: a.per_condition, seed: a.seed, ..Default::default() };
    let corpus = synthetic::generate(&cfg);
    fs::create_dir_all(&a.out)?;
    let (u, l): (PathBuf, PathBuf) = (a.out.join("unlabeled.txt"), a.out.join("labeled.tsv"));
    fs::write(&u, corpus.unlabeled_file())?;
    fs::write(&l, corpus.labeled_file())?;
    info!("wrote {} and {}", u.display(), l.display());
    Ok(())
}
