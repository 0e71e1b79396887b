use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use spdhead::bench::{run_bench, BenchConfig, BenchResult};
use spdhead::descriptor::{EmbeddingSequence, Modality};
use spdhead::encoder::single_block_attention;
use spdhead::gradcheck::{run_gradcheck, GradcheckConfig};
use spdhead::io::{case_embeddings, load_checkpoint, load_dataset, save_checkpoint, write_dataset, read_volume};
use spdhead::linalg::Matrix;
use spdhead::report::{build_report, sphere_zone_fractions, ClinicalVars, Vocabulary, DEFAULT_RADIUS_MM};
use spdhead::spdnet::HeadKind;
use spdhead::trainer::{
    derive_seed, evaluate, gen_synth, stratified_kfold, train, CaseFeatures, CaseInputs, CaseRecord, Encoders, SynthConfig, TrainConfig,
};

#[derive(Parser)]
#[command(name = "spdhead", version, about = "SPD-manifold classification head: data, training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (manifest, ESEQ files, vocabulary).
    GenSynth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, env = "SPDG_SEED")]
        seed: Option<u64>,
    },
    /// Train one head on every fold but `--fold`, validating on `--fold`.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        head: HeadKind,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        fold: usize,
        #[arg(long, env = "SPDG_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch history CSV; defaults to `<out>.history.csv`.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Score the held-out fold of a checkpoint (every case if it has no fold).
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Training-fraction sweep over all folds with paired head comparisons.
    Bench {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.25,0.5,1.0")]
        fractions: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "geom,cls,gap")]
        heads: Vec<HeadKind>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, env = "SPDG_SEED", default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every backward pass.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = GradModule::All)]
        module: GradModule,
        #[arg(long, env = "SPDG_SEED", default_value_t = 0)]
        seed: u64,
    },
    /// Print the clinical report and its token IDs.
    Report {
        #[arg(long)]
        vars: PathBuf,
        /// Peripheral- and central-zone masks, `pz.raw,cz.raw`.
        #[arg(long, value_parser = parse_masks)]
        masks: (PathBuf, PathBuf),
        /// Lesion centroid in mm, `x,y,z`.
        #[arg(long, value_parser = parse_point, allow_hyphen_values = true)]
        centroid: [f64; 3],
        #[arg(long, default_value_t = DEFAULT_RADIUS_MM)]
        radius: f64,
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Class-to-token attention of the last encoder block, per branch.
    Attn {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        case: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum GradModule {
    All,
    Spdnet,
    Trainer,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            print_error("Usage", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e
                .chain()
                .find_map(|c| c.downcast_ref::<spdhead::Error>())
                .map_or("Error", spdhead::Error::kind);
            print_error(kind, &format!("{e:#}"));
            ExitCode::FAILURE
        }
    }
}

fn print_error(kind: &str, message: &str) {
    let line = serde_json::json!({ "error": kind, "message": message.replace('\n', " ") });
    eprintln!("{line}");
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenSynth { config, out, seed } => gen_synth_cmd(config, &out, seed),
        Command::Train {
            manifest,
            head,
            config,
            fold,
            seed,
            out,
            history,
        } => train_cmd(&manifest, head, config, fold, seed, &out, history),
        Command::Eval { manifest, ckpt, out } => eval_cmd(&manifest, &ckpt, &out),
        Command::Bench {
            manifest,
            fractions,
            heads,
            config,
            epochs,
            seed,
            out,
        } => bench_cmd(&manifest, fractions, heads, config, epochs, seed, &out),
        Command::Gradcheck { module, seed } => gradcheck_cmd(module, seed),
        Command::Report {
            vars,
            masks,
            centroid,
            radius,
            vocab,
        } => report_cmd(&vars, &masks, centroid, radius, vocab),
        Command::Attn {
            manifest,
            ckpt,
            case,
            out,
        } => attn_cmd(&manifest, &ckpt, &case, &out),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn train_config(path: Option<PathBuf>) -> Result<TrainConfig> {
    let cfg = match path {
        Some(p) => read_json(&p)?,
        None => TrainConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn vocab_for(manifest: &Path) -> Result<Vocabulary> {
    let p = manifest.parent().unwrap_or(Path::new(".")).join("vocab.txt");
    Ok(if p.exists() { Vocabulary::read(&p)? } else { Vocabulary::default() })
}

/// Case features and one fold index per case.
struct Dataset {
    features: Vec<CaseFeatures>,
    folds: Vec<usize>,
}

fn load_features(manifest: &Path, cfg: &TrainConfig, seed: u64) -> Result<Dataset> {
    let cases = load_dataset(manifest).with_context(|| format!("loading {}", manifest.display()))?;
    if cases.is_empty() {
        bail!("manifest {} lists no cases", manifest.display());
    }
    let needs_encoders = cases.iter().any(|c| matches!(c.inputs, CaseInputs::Volumes(_)));
    let encoders = if needs_encoders {
        Some(Encoders::new(&cfg.encoder, cfg.encoder_seed, vocab_for(manifest)?)?)
    } else {
        None
    };
    let mut features = Vec::with_capacity(cases.len());
    for c in &cases {
        let emb = match &encoders {
            Some(enc) => case_embeddings(c, enc)?,
            None => case_embeddings_plain(c)?,
        };
        features.push(
            CaseFeatures::from_embeddings(&c.id, c.label, c.subtag, &emb, cfg.multimodal, cfg.head.jitter)
                .with_context(|| format!("case {}", c.id))?,
        );
    }
    let folds = match cases.iter().map(|c| c.fold).collect::<Option<Vec<_>>>() {
        Some(f) => f,
        None => {
            let strata: Vec<_> = cases.iter().map(CaseRecord::stratum).collect();
            stratified_kfold(&strata, cfg.folds, seed)?
        }
    };
    Ok(Dataset {
        features,
        folds,
    })
}

fn case_embeddings_plain(c: &CaseRecord) -> Result<spdhead::trainer::Embeddings> {
    match &c.inputs {
        CaseInputs::Embeddings(e) => Ok(e.clone()),
        CaseInputs::Volumes(_) => bail!("case {} needs the encoders", c.id),
    }
}

fn gen_synth_cmd(config: Option<PathBuf>, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg: SynthConfig = match config {
        Some(p) => read_json(&p)?,
        None => SynthConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let cases = gen_synth(&cfg)?;
    fs::create_dir_all(out)?;
    let manifest = write_dataset(out, &cases)?;
    Vocabulary::default().write(&out.join("vocab.txt"))?;
    fs::write(out.join("synth_config.json"), serde_json::to_string_pretty(&cfg)?)?;
    let pos = cases.iter().filter(|c| c.label == 1).count();
    println!("wrote {} cases ({pos} positive) to {}", cases.len(), manifest.display());
    Ok(())
}

fn train_cmd(
    manifest: &Path,
    head: HeadKind,
    config: Option<PathBuf>,
    fold: usize,
    seed: u64,
    out: &Path,
    history: Option<PathBuf>,
) -> Result<()> {
    let cfg = train_config(config)?;
    let data = load_features(manifest, &cfg, seed)?;
    let k = data.folds.iter().max().map_or(0, |m| m + 1);
    if fold >= k {
        bail!("fold {fold} out of range: the dataset has {k} folds");
    }
    let (mut tr, mut va) = (Vec::new(), Vec::new());
    for (f, &i) in data.features.iter().zip(&data.folds) {
        if i == fold {
            va.push(f);
        } else {
            tr.push(f);
        }
    }
    let output = train(head, &tr, &va, &cfg, derive_seed(seed, fold as u64))?;
    save_checkpoint(out, &output.model, &cfg, seed, Some(fold))?;

    let hist_path = history.unwrap_or_else(|| PathBuf::from(format!("{}.history.csv", out.display())));
    let mut w = csv::Writer::from_path(&hist_path)?;
    w.write_record(["epoch", "train_loss", "val_auc_pr", "val_fpr95"])?;
    for r in &output.history {
        w.write_record([
            r.epoch.to_string(),
            r.train_loss.to_string(),
            opt(r.val_auc_pr),
            opt(r.val_fpr95.map(|v| v * 100.0)),
        ])?;
    }
    w.flush()?;
    let last = output.history.last();
    println!(
        "trained {} on {} cases, fold {fold}: train_loss {} val_auc_pr {}",
        head.as_str(),
        tr.len(),
        last.map_or("-".into(), |r| format!("{:.4}", r.train_loss)),
        last.map_or("-".into(), |r| opt(r.val_auc_pr)),
    );
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

#[derive(Serialize)]
struct EvalReport {
    head: HeadKind,
    fold: Option<usize>,
    n: usize,
    positives: usize,
    auc_pr: Option<f64>,
    auc_roc: Option<f64>,
    fpr95: Option<f64>,
}

fn eval_cmd(manifest: &Path, ckpt: &Path, out: &Path) -> Result<()> {
    let ck = load_checkpoint(ckpt, None).with_context(|| format!("loading {}", ckpt.display()))?;
    let cfg = &ck.header.config;
    let data = load_features(manifest, cfg, ck.header.seed)?;
    let set: Vec<&CaseFeatures> = data
        .features
        .iter()
        .zip(&data.folds)
        .filter(|(_, &f)| ck.header.fold.is_none_or(|k| f == k))
        .map(|(c, _)| c)
        .collect();
    if set.is_empty() {
        bail!("no cases to evaluate");
    }
    let m = evaluate(&ck.model, &set)?;
    let report = EvalReport {
        head: ck.header.head,
        fold: ck.header.fold,
        n: m.n,
        positives: m.positives,
        auc_pr: m.auc_pr,
        auc_roc: m.auc_roc,
        fpr95: m.fpr95,
    };
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    fs::write(out, &text)?;
    print!("{text}");
    Ok(())
}

fn bench_cmd(
    manifest: &Path,
    fractions: Vec<f64>,
    heads: Vec<HeadKind>,
    config: Option<PathBuf>,
    epochs: Option<usize>,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let mut cfg = BenchConfig {
        fractions,
        heads,
        seed,
        ..BenchConfig::default()
    };
    if let Some(p) = config {
        cfg.train = read_json(&p)?;
    }
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    cfg.train.validate()?;
    let data = load_features(manifest, &cfg.train, seed)?;
    let result = run_bench(&data.features, &data.folds, &cfg, |r| {
        eprintln!(
            "fraction {} head {} fold {}: auc_pr {}",
            r.fraction,
            r.head.as_str(),
            r.fold,
            opt(r.metrics.auc_pr)
        );
    })?;
    write_bench_csv(out, &result)?;
    println!("prevalence {:.4}", result.prevalence);
    for p in &result.pooled {
        println!(
            "fraction {} {:>4}: auc_pr {} fpr95 {} {}",
            p.fraction,
            p.head.as_str(),
            p.metrics.auc_pr.map_or("-".into(), |v| format!("{:.4}", v)),
            p.metrics.fpr95.map_or("-".into(), |v| format!("{:.2}", v * 100.0)),
            p.comparison
                .as_ref()
                .map_or(String::new(), |c| format!("wilcoxon vs {} p={:.3e}", c.reference.as_str(), c.result.p_value)),
        );
    }
    Ok(())
}

/// One row per (fraction, head, fold) plus a `pooled` row per (fraction, head).
/// FPR95 is written on the 0-100 scale.
pub fn write_bench_csv(path: &Path, r: &BenchResult) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "fraction",
        "head",
        "fold",
        "n_train",
        "n_eval",
        "auc_pr",
        "auc_roc",
        "fpr95",
        "fold_mean_auc_pr",
        "wilcoxon_reference",
        "wilcoxon_statistic",
        "wilcoxon_p",
    ])?;
    for f in &r.folds {
        w.write_record([
            f.fraction.to_string(),
            f.head.as_str().into(),
            f.fold.to_string(),
            f.n_train.to_string(),
            f.metrics.n.to_string(),
            opt(f.metrics.auc_pr),
            opt(f.metrics.auc_roc),
            opt(f.metrics.fpr95.map(|v| v * 100.0)),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
        ])?;
    }
    for p in &r.pooled {
        let c = p.comparison.as_ref();
        w.write_record([
            p.fraction.to_string(),
            p.head.as_str().into(),
            "pooled".into(),
            String::new(),
            p.metrics.n.to_string(),
            opt(p.metrics.auc_pr),
            opt(p.metrics.auc_roc),
            opt(p.metrics.fpr95.map(|v| v * 100.0)),
            opt(p.fold_mean_auc_pr),
            c.map_or(String::new(), |c| c.reference.as_str().into()),
            opt(c.map(|c| c.result.statistic)),
            opt(c.map(|c| c.result.p_value)),
        ])?;
    }
    w.flush()?;
    Ok(())
}

const TRAINER_LAYERS: [&str; 3] = ["project_pair", "infonce_loss", "bce_loss"];

fn gradcheck_cmd(module: GradModule, seed: u64) -> Result<()> {
    let cfg = GradcheckConfig {
        seed,
        ..GradcheckConfig::default()
    };
    let reports = run_gradcheck(&cfg)?;
    let mut failed = Vec::new();
    for r in reports.iter().filter(|r| match module {
        GradModule::All => true,
        GradModule::Trainer => TRAINER_LAYERS.contains(&r.layer.as_str()),
        GradModule::Spdnet => !TRAINER_LAYERS.contains(&r.layer.as_str()),
    }) {
        let err = r.max_rel_err();
        let ok = err <= cfg.tolerance;
        println!("{:<14} max_rel_err {:.3e} {}", r.layer, err, if ok { "ok" } else { "FAIL" });
        if !ok {
            failed.push(r.layer.clone());
        }
    }
    if !failed.is_empty() {
        bail!("gradient check failed for {} (tolerance {:e})", failed.join(","), cfg.tolerance);
    }
    Ok(())
}

fn parse_masks(s: &str) -> std::result::Result<(PathBuf, PathBuf), String> {
    match s.split_once(',') {
        Some((a, b)) if !a.is_empty() && !b.is_empty() && !b.contains(',') => Ok((a.into(), b.into())),
        _ => Err("expected two paths, pz,cz".into()),
    }
}

fn parse_point(s: &str) -> std::result::Result<[f64; 3], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| format!("{t:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    <[f64; 3]>::try_from(v).map_err(|v| format!("expected x,y,z, got {} values", v.len()))
}

fn report_cmd(vars: &Path, masks: &(PathBuf, PathBuf), centroid: [f64; 3], radius: f64, vocab: Option<PathBuf>) -> Result<()> {
    let vars: ClinicalVars = read_json(vars)?;
    let pz = read_volume(&masks.0).with_context(|| format!("reading {}", masks.0.display()))?;
    let cz = read_volume(&masks.1).with_context(|| format!("reading {}", masks.1.display()))?;
    let zf = sphere_zone_fractions(centroid, radius, &pz, &cz)?;
    let vocab = match vocab {
        Some(p) => Vocabulary::read(&p)?,
        None => Vocabulary::default(),
    };
    let text = build_report(&vars, &zf);
    let ids: Vec<String> = vocab.tokenize(&text).iter().map(u32::to_string).collect();
    println!("{text}");
    println!("{}", ids.join(" "));
    println!("p_pz {} p_cz {} p_out {}", zf.p_pz, zf.p_cz, zf.p_out);
    Ok(())
}

/// Moves the class token to row 0, as the attention helpers expect.
fn class_first(seq: &EmbeddingSequence) -> Result<Matrix> {
    let t = seq.tokens();
    let Some(k) = seq.class_index() else {
        bail!("{} sequence has no class token", seq.modality());
    };
    let order = std::iter::once(k).chain((0..t.rows()).filter(|&i| i != k));
    let rows: Vec<&[f64]> = order.map(|i| t.row(i)).collect();
    Ok(Matrix::from_rows(&rows))
}

fn attn_cmd(manifest: &Path, ckpt: &Path, case: &str, out: &Path) -> Result<()> {
    let ck = load_checkpoint(ckpt, None).with_context(|| format!("loading {}", ckpt.display()))?;
    let cfg = &ck.header.config;
    let cases = load_dataset(manifest)?;
    let c = cases
        .iter()
        .find(|c| c.id == case)
        .with_context(|| format!("case `{case}` not in {}", manifest.display()))?;
    let mut rows: Vec<(Modality, Vec<f64>)> = Vec::new();
    match &c.inputs {
        CaseInputs::Volumes(v) => {
            let enc = Encoders::new(&cfg.encoder, cfg.encoder_seed, vocab_for(manifest)?)?;
            rows.push((Modality::T2w, enc.image.attention_map(&v.t2w)?));
            rows.push((Modality::Adc, enc.image.attention_map(&v.adc)?));
            rows.push((Modality::Dwi, enc.image.attention_map(&v.dwi)?));
            if let Some(cv) = &c.clinical {
                let ids = enc.vocab.tokenize(&enc.report_for(v, cv)?);
                rows.push((Modality::Text, enc.text.attention_map(&ids)?));
            }
        }
        CaseInputs::Embeddings(e) => {
            // precomputed sequences: one frozen block per branch on top of them
            let mut seqs = vec![&e.t2w, &e.adc, &e.dwi];
            seqs.extend(e.text.as_ref());
            for (i, s) in seqs.into_iter().enumerate() {
                let seed = derive_seed(cfg.encoder_seed, 100 + i as u64);
                rows.push((s.modality(), single_block_attention(&class_first(s)?, cfg.encoder.heads, seed)?));
            }
        }
    }
    let mut w = csv::Writer::from_path(out)?;
    w.write_record(["branch", "token", "weight"])?;
    for (m, weights) in &rows {
        for (j, a) in weights.iter().enumerate() {
            w.write_record([m.as_str().to_string(), (j + 1).to_string(), a.to_string()])?;
        }
    }
    w.flush()?;
    for (m, weights) in &rows {
        let (arg, max) = weights
            .iter()
            .enumerate()
            .fold((0, f64::MIN), |b, (j, &a)| if a > b.1 { (j + 1, a) } else { b });
        println!("{m}: {} tokens, max weight {max:.4} at token {arg}", weights.len());
    }
    Ok(())
}
