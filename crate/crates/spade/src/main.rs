//! Command-line interface: phantom generation, registration,
//! correspondence inspection, cohort audits, pretraining, probing, and
//! run reports.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use spade::affine::{TransformRecord, TransformSet};
use spade::error::{Result, SpadeError};
use spade::model::read_checkpoint;
use spade::patch::{patch_iou, to_template, Patch};
use spade::phantom::{generate_corpus, CorpusSpec};
use spade::probe::alignment_probe;
use spade::registration::{register, RegistrationConfig};
use spade::sampling::{
    build_global_cohorts, sample_anchor_pairs, CohortMember, SamplingConfig, StrategyId,
};
use spade::trainer::{prepare_corpus, run_train, Corpus, TrainConfig};
use spade::volume::{read_svol, read_svol_dir, write_svol};

#[derive(Parser)]
#[command(name = "spade", version, about = "Correspondence-debiased contrastive pretraining on 3D volumes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom corpus from a JSON spec.
    PhantomGen {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Register one moving volume to a template.
    Register {
        #[arg(long)]
        moving: PathBuf,
        #[arg(long)]
        template: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Register every volume in a directory to the named template volume.
    RegisterCorpus {
        #[arg(long)]
        volumes: PathBuf,
        #[arg(long)]
        template_id: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Template-space IoU of two patches.
    Iou {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        transforms: PathBuf,
    },
    /// Audit cohort membership for a strategy over a sampled batch.
    Sample {
        #[arg(long)]
        strategy: String,
        #[arg(long)]
        volumes: PathBuf,
        #[arg(long)]
        transforms: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Pretrain on a registered corpus.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        volumes: PathBuf,
        #[arg(long)]
        transforms: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Alignment probe of a checkpoint over a registered corpus.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        volumes: PathBuf,
        #[arg(long)]
        transforms: PathBuf,
        #[arg(long, default_value_t = 64)]
        pairs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_delimiter = ',', num_args = 3)]
        crop_size: Option<Vec<usize>>,
    },
    /// Emit plot-ready CSVs from a run directory.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

fn env_seed_override(seed: u64) -> u64 {
    match std::env::var("SPADE_SEED") {
        Ok(s) => s.parse().unwrap_or(seed),
        Err(_) => seed,
    }
}

fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let s = std::fs::read_to_string(path)
        .map_err(|e| SpadeError::Data(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&s)
        .map_err(|e| SpadeError::Parameter(format!("cannot parse {}: {e}", path.display())))
}

fn cmd_phantom_gen(spec_path: &Path, out: &Path) -> Result<()> {
    let mut spec: CorpusSpec = load_json(spec_path)?;
    spec.seed = env_seed_override(spec.seed);
    std::fs::create_dir_all(out)?;
    let corpus = generate_corpus(&spec)?;
    for (v, _) in &corpus {
        let path = out.join(format!("{}.svol", v.id));
        write_svol(v, &path)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_register(moving: &Path, template: &Path, out: &Path, config: Option<&Path>) -> Result<()> {
    let cfg: RegistrationConfig = match config {
        Some(p) => load_json(p)?,
        None => RegistrationConfig::default(),
    };
    let m = read_svol(moving)?;
    let t = read_svol(template)?;
    let (transform, final_ncc) = register(&m, &t, &cfg)?;
    let rec = TransformRecord::from_transform(&transform, &m.id, &t.id, final_ncc);
    rec.write(out)?;
    println!("registered {} -> {} (ncc {final_ncc:.4})", m.id, t.id);
    Ok(())
}

fn cmd_register_corpus(
    volumes: &Path,
    template_id: &str,
    out: &Path,
    config: Option<&Path>,
) -> Result<()> {
    let cfg: RegistrationConfig = match config {
        Some(p) => load_json(p)?,
        None => RegistrationConfig::default(),
    };
    let vols = read_svol_dir(volumes)?;
    std::fs::create_dir_all(out)?;
    let results = prepare_corpus(&vols, template_id, &cfg)?;
    for (id, t, ncc) in &results {
        let rec = TransformRecord::from_transform(t, id, template_id, *ncc);
        let path = out.join(format!("{id}.affine.json"));
        rec.write(&path)?;
        println!("{id}: ncc {ncc:.4} -> {}", path.display());
    }
    Ok(())
}

fn cmd_iou(a: &Path, b: &Path, transforms: &Path) -> Result<()> {
    let pa: Patch = load_json(a)?;
    let pb: Patch = load_json(b)?;
    let set = TransformSet::read_dir(transforms)?;
    let fa = to_template(&pa, set.require(&pa.volume_id)?)?;
    let fb = to_template(&pb, set.require(&pb.volume_id)?)?;
    println!("{}", patch_iou(&fa, &fb));
    Ok(())
}

#[derive(Serialize)]
struct CohortAuditEntry {
    label: String,
    iou: f64,
}

#[derive(Serialize)]
struct CohortAudit {
    anchor: Patch,
    footprint_corner: [f64; 3],
    footprint_size: [f64; 3],
    positives: Vec<CohortAuditEntry>,
    negatives: Vec<CohortAuditEntry>,
}

#[derive(Serialize)]
struct SampleReport {
    strategy: String,
    seed: u64,
    anchors: Vec<CohortAudit>,
}

/// Build an auditable picture of cohort membership: sample anchor pairs
/// in every volume, take their footprints as a stand-in bank, and list
/// which entries each strategy keeps as negatives or repurposes as
/// positives.
fn cmd_sample(
    strategy: &str,
    volumes: &Path,
    transforms: &Path,
    config: Option<&Path>,
    out: &Path,
    seed: u64,
) -> Result<()> {
    let strategy: StrategyId = strategy.parse()?;
    if !strategy.is_global() {
        return Err(SpadeError::Parameter(
            "the sample audit covers global strategies; pass MoCo-baseline, G1, G2 or G3".into(),
        ));
    }
    let seed = env_seed_override(seed);
    let cfg: SamplingConfig = match config {
        Some(p) => load_json(p)?,
        None => SamplingConfig::default(),
    };
    let raw = read_svol_dir(volumes)?;
    let set = TransformSet::read_dir(transforms)?;
    let corpus = Corpus::prepare(raw, set)?;

    // Sample pairs per volume and collect every crop's footprint.
    let mut crops: Vec<(Patch, spade::patch::TemplateFootprint)> = Vec::new();
    for (i, v) in corpus.volumes.iter().enumerate() {
        let pairs = sample_anchor_pairs(v, &cfg, seed ^ (i as u64 + 1))?;
        for (a, b) in pairs {
            for p in [a, b] {
                let fp = to_template(&p, corpus.transform_of(i))?;
                crops.push((p, fp));
            }
        }
    }

    let mut bank = spade::bank::MemoryBank::new(crops.len().max(1))?;
    for (p, fp) in &crops {
        let label = format!("{}@{:?}", p.volume_id, p.corner);
        let mut e = vec![0.0f32; 2];
        e[0] = 1.0;
        let _ = label;
        bank.enqueue(vec![(e, fp.clone())])?;
    }
    let snap = bank.snapshot();

    let mut anchors = Vec::new();
    for (idx, (p, fp)) in crops.iter().enumerate() {
        let anchor = CohortMember::live(vec![1.0, 0.0], 0, format!("anchor-{idx}"));
        let pair = build_global_cohorts(strategy, anchor, Vec::new(), fp, &snap, cfg.o)?;
        let describe = |age: u64| -> CohortAuditEntry {
            let (cp, cfp) = &crops[age as usize];
            CohortAuditEntry {
                label: format!("{}@{:?}", cp.volume_id, cp.corner),
                iou: patch_iou(cfp, fp),
            }
        };
        let positives = pair
            .positives
            .iter()
            .filter_map(|m| {
                m.label
                    .strip_prefix("bank:")
                    .and_then(|s| s.parse::<u64>().ok())
                    .map(&describe)
            })
            .collect();
        let negatives = pair.negatives.iter().map(|e| describe(e.age)).collect();
        anchors.push(CohortAudit {
            anchor: p.clone(),
            footprint_corner: fp.corner,
            footprint_size: fp.size,
            positives,
            negatives,
        });
    }

    let report = SampleReport { strategy: strategy.to_string(), seed, anchors };
    std::fs::write(out, serde_json::to_string_pretty(&report)?)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_train(config: &Path, volumes: &Path, transforms: &Path, out: &Path) -> Result<()> {
    let mut cfg: TrainConfig = load_json(config)?;
    cfg.seed = env_seed_override(cfg.seed);
    let raw = read_svol_dir(volumes)?;
    let set = TransformSet::read_dir(transforms)?;
    let corpus = Corpus::prepare(raw, set)?;
    let summary = run_train(&cfg, &corpus, out)?;
    if let Some(last) = summary.records.last() {
        println!(
            "finished {} steps; final loss {:.4} (global {:.4}, local {:.4}, recon {:.5})",
            cfg.steps, last.loss_total, last.loss_global, last.loss_local, last.loss_recon
        );
    }
    println!("metrics: {}", out.join("metrics.csv").display());
    Ok(())
}

fn cmd_probe(
    checkpoint: &Path,
    volumes: &Path,
    transforms: &Path,
    pairs: usize,
    seed: u64,
    crop_size: Option<Vec<usize>>,
) -> Result<()> {
    let seed = env_seed_override(seed);
    let (net, params) = read_checkpoint(checkpoint)?;
    let raw = read_svol_dir(volumes)?;
    let set = TransformSet::read_dir(transforms)?;
    let corpus = Corpus::prepare(raw, set)?;
    let crop = match crop_size {
        Some(v) => [v[0], v[1], v[2]],
        None => {
            let m = net.cfg.dim_multiple();
            [m * 2, m * 4, m * 4]
        }
    };
    let result = alignment_probe(&net, &params.theta, &corpus, crop, pairs, seed)?;
    println!("{}", serde_json::to_string_pretty(&result)?);
    Ok(())
}

fn cmd_report(run: &Path) -> Result<()> {
    let metrics = std::fs::read_to_string(run.join("metrics.csv"))
        .map_err(|e| SpadeError::Data(format!("no metrics.csv in {}: {e}", run.display())))?;
    let mut lines = metrics.lines();
    let header = lines
        .next()
        .ok_or_else(|| SpadeError::Data("metrics.csv is empty".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    let find = |name: &str| -> Result<usize> {
        cols.iter()
            .position(|c| *c == name)
            .ok_or_else(|| SpadeError::Data(format!("metrics.csv missing column {name}")))
    };
    let loss_cols = [
        find("step")?,
        find("loss_global")?,
        find("loss_local")?,
        find("loss_recon")?,
        find("loss_total")?,
        find("lr")?,
    ];
    let cohort_cols = [
        find("step")?,
        find("mean_positives")?,
        find("mean_negatives")?,
        find("mean_debiased")?,
        find("bank_global")?,
        find("bank_local")?,
        find("corr_cos")?,
        find("noncorr_cos")?,
    ];

    let mut loss_out = String::from("step,loss_global,loss_local,loss_recon,loss_total,lr\n");
    let mut cohort_out = String::from(
        "step,mean_positives,mean_negatives,mean_debiased,bank_global,bank_local,corr_cos,noncorr_cos\n",
    );
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            continue;
        }
        let pick = |idxs: &[usize]| idxs.iter().map(|&i| fields[i]).collect::<Vec<_>>().join(",");
        loss_out.push_str(&pick(&loss_cols));
        loss_out.push('\n');
        cohort_out.push_str(&pick(&cohort_cols));
        cohort_out.push('\n');
    }
    let loss_path = run.join("loss_curves.csv");
    let cohort_path = run.join("cohort_stats.csv");
    std::fs::write(&loss_path, loss_out)?;
    std::fs::write(&cohort_path, cohort_out)?;
    println!("wrote {}", loss_path.display());
    println!("wrote {}", cohort_path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::PhantomGen { spec, out } => cmd_phantom_gen(&spec, &out),
        Command::Register { moving, template, out, config } => {
            cmd_register(&moving, &template, &out, config.as_deref())
        }
        Command::RegisterCorpus { volumes, template_id, out, config } => {
            cmd_register_corpus(&volumes, &template_id, &out, config.as_deref())
        }
        Command::Iou { a, b, transforms } => cmd_iou(&a, &b, &transforms),
        Command::Sample { strategy, volumes, transforms, config, out, seed } => {
            cmd_sample(&strategy, &volumes, &transforms, config.as_deref(), &out, seed)
        }
        Command::Train { config, volumes, transforms, out } => {
            cmd_train(&config, &volumes, &transforms, &out)
        }
        Command::Probe { checkpoint, volumes, transforms, pairs, seed, crop_size } => {
            cmd_probe(&checkpoint, &volumes, &transforms, pairs, seed, crop_size)
        }
        Command::Report { run } => cmd_report(&run),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
