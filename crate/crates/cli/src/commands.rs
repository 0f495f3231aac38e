use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use log::{info, warn};
use serde::Serialize;
use sehm_autodiff::Tensor;
use sehm_core::bench::{ablation_run, benchmark_neighbor_size};
use sehm_core::data::{encode_sample, generate_synthetic, load_dataset, save_dataset, split_indices, Dataset};
use sehm_core::explainer::{explain as explain_one, lipschitz_certificate};
use sehm_core::io::{contribution_rows, load_checkpoint, save_checkpoint, write_contributions, Checkpoint, Manifest};
use sehm_core::metrics::{
    aopc, auprc, auroc, estimated_lipschitz, local_accuracy_of, random_ranking, rank_by_magnitude, AopcPoint,
    MetricsReport,
};
use sehm_core::model::SehmModel;
use sehm_core::rng;
use sehm_core::train::{encode_split, latents, predict_set, train as train_model, AblationFlags};

use crate::config::RunConfig;
use crate::error::{io_err, CliError, Result};

pub const CHECKPOINT_FILE: &str = "model.ckpt";

fn manifest(command: &str, cfg: &RunConfig) -> Manifest {
    let mut m = Manifest::new(command, cfg.to_json());
    m.seeds = vec![
        ("model".into(), cfg.model.seed),
        ("train".into(), cfg.train.seed),
        ("split".into(), cfg.train.split_seed),
        ("synthetic".into(), cfg.synthetic.seed),
        ("explainer".into(), cfg.explainer.seed),
        ("evaluate".into(), cfg.evaluate.seed),
    ];
    m
}

fn finish(mut m: Manifest, out: &Path) -> Result<()> {
    let path = out.join(format!("{}.manifest.json", m.command));
    m.outputs.push(path.display().to_string());
    m.save(&path)?;
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

fn write_json(path: &Path, value: &impl Serialize, m: &mut Manifest) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))?;
    m.outputs.push(path.display().to_string());
    Ok(())
}

fn dataset(cfg: &RunConfig, m: &mut Manifest) -> Result<Dataset> {
    match &cfg.data {
        Some(path) => {
            if !path.is_file() {
                return Err(CliError::Config(format!("dataset {} does not exist", path.display())));
            }
            m.inputs.push(path.display().to_string());
            load_dataset(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
        }
        None => {
            info!("generating the synthetic task in memory (seed {})", cfg.synthetic.seed);
            Ok(generate_synthetic(&cfg.synthetic)?)
        }
    }
}

fn checkpoint(path: &Path, m: &mut Manifest) -> Result<Checkpoint> {
    if !path.is_file() {
        return Err(CliError::Config(format!("checkpoint {} does not exist", path.display())));
    }
    m.inputs.push(path.display().to_string());
    load_checkpoint(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn generate_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let mut m = manifest("generate-data", cfg);
    let data = generate_synthetic(&cfg.synthetic)?;
    let path = out.join("data.jsonl");
    save_dataset(&data, &path)?;
    m.outputs.push(path.display().to_string());
    let positives = data.samples.iter().filter(|s| s.label == 1).count();
    println!("wrote {} samples ({positives} positive) to {}", data.len(), path.display());
    finish(m, out)
}

#[derive(Serialize)]
struct TimingFile<'a> {
    epoch_ms: &'a [f64],
}

pub fn train(cfg: &RunConfig, out: &Path) -> Result<()> {
    let mut m = manifest("train", cfg);
    let data = dataset(cfg, &mut m)?;
    let mut model = SehmModel::new(cfg.model.clone())?;
    info!("training on {} samples for {} epochs", data.len(), cfg.train.epochs);
    let outcome = train_model(&mut model, &data, &cfg.train, &cfg.explainer)?;
    let ckpt = Checkpoint {
        model,
        standardizer: outcome.standardizer,
        explainer: outcome.explainer,
    };
    let path = out.join(CHECKPOINT_FILE);
    save_checkpoint(&path, &ckpt)?;
    m.outputs.push(path.display().to_string());
    write_json(&out.join("history.json"), &outcome.history, &mut m)?;
    write_json(&out.join("timing.json"), &TimingFile { epoch_ms: &outcome.epoch_ms }, &mut m)?;
    if let Some(last) = outcome.history.epochs.last() {
        println!(
            "trained {} epochs; final validation AUROC {}",
            last.epoch + 1,
            last.val_auroc.map_or("n/a".into(), |a| format!("{a:.4}"))
        );
    }
    finish(m, out)
}

fn previous_epoch_ms(ckpt_path: &Path) -> Vec<f64> {
    #[derive(serde::Deserialize)]
    struct Stored {
        epoch_ms: Vec<f64>,
    }
    let Some(dir) = ckpt_path.parent() else { return Vec::new() };
    std::fs::read_to_string(dir.join("timing.json"))
        .ok()
        .and_then(|s| serde_json::from_str::<Stored>(&s).ok())
        .map(|s| s.epoch_ms)
        .unwrap_or_default()
}

pub fn evaluate(cfg: &RunConfig, out: &Path, ckpt_path: &Path) -> Result<()> {
    let mut m = manifest("evaluate", cfg);
    let ckpt = checkpoint(ckpt_path, &mut m)?;
    let data = dataset(cfg, &mut m)?;
    let model = &ckpt.model;
    let split = split_indices(data.len(), cfg.train.split_seed)?;
    let set = encode_split(model, &data, &split.test, &ckpt.standardizer)?;
    let probs = predict_set(model, &set, 64)?;
    let mut report = MetricsReport {
        auroc: auroc(&probs, &set.labels)?,
        auprc: auprc(&probs, &set.labels)?,
        local_accuracy: None,
        aopc: Vec::new(),
        aopc_random: Vec::new(),
        estimated_lipschitz: None,
        lipschitz_certificate: None,
        epoch_ms: previous_epoch_ms(ckpt_path),
    };

    if let Some(net) = &ckpt.explainer {
        let ec = &cfg.evaluate;
        let rows: Vec<usize> = (0..set.len().min(ec.samples)).collect();
        let positions = set.length * set.vars;
        let cutoffs: Vec<usize> = ec.cutoffs.iter().copied().filter(|&k| k <= positions).collect();
        if cutoffs.len() < ec.cutoffs.len() {
            warn!("dropping AOPC cutoffs beyond the {positions} input positions");
        }
        let inputs: Vec<Vec<f64>> = rows.iter().map(|&r| set.inputs[r].clone()).collect();
        let (padded, vars) = (set.padded, set.vars);
        let predict = |batch: &[Vec<f64>]| -> sehm_core::Result<Vec<f64>> {
            let flat: Vec<f64> = batch.iter().flatten().copied().collect();
            model.predict_proba(&Tensor::new(vec![batch.len(), padded, vars], flat)?)
        };
        if !cutoffs.is_empty() && !rows.is_empty() {
            let ranked: Vec<Vec<usize>> = rows
                .iter()
                .map(|&r| Ok(rank_by_magnitude(explain_one(model, net, &set.series(r)?)?.beta.data())))
                .collect::<Result<_>>()?;
            report.aopc = aopc(predict, &inputs, &ranked, &cutoffs)?;
            let mut sums = vec![0.0; cutoffs.len()];
            for k in 0..ec.random_rankings {
                let seed = rng::derive(ec.seed, k as u64);
                let random: Vec<Vec<usize>> =
                    (0..rows.len()).map(|i| random_ranking(positions, rng::derive(seed, i as u64))).collect();
                for (s, p) in sums.iter_mut().zip(aopc(predict, &inputs, &random, &cutoffs)?) {
                    *s += p.value;
                }
            }
            report.aopc_random = cutoffs
                .iter()
                .zip(sums)
                .map(|(&cutoff, s)| AopcPoint {
                    cutoff,
                    value: s / ec.random_rankings.max(1) as f64,
                })
                .collect();
        }
        if !rows.is_empty() {
            let z = latents(model, &set, &rows)?;
            let dr = z.shape()[1];
            let mean_norm =
                z.data().chunks(dr).map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).sum::<f64>() / rows.len() as f64;
            report.local_accuracy = Some(local_accuracy_of(model, net, &z)?);
            let delta = ec.lipschitz_delta_frac * mean_norm;
            if delta > 0.0 {
                report.estimated_lipschitz =
                    Some(estimated_lipschitz(net, model, &z, delta, ec.lipschitz_perturbations, ec.seed)?);
            }
        }
        report.lipschitz_certificate = Some(lipschitz_certificate(net)?);
    } else {
        info!("checkpoint has no explainer; reporting predictive metrics only");
    }
    write_json(&out.join("metrics.json"), &report, &mut m)?;
    println!("test AUROC {:.4}  AUPRC {:.4}", report.auroc, report.auprc);
    finish(m, out)
}

#[derive(Serialize)]
struct ExplanationSummary {
    row: usize,
    id: String,
    label: u8,
    f: f64,
    g: f64,
    reconstruction: f64,
    contributions: String,
}

fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

pub fn explain(cfg: &RunConfig, out: &Path, ckpt_path: &Path) -> Result<()> {
    let mut m = manifest("explain", cfg);
    let ckpt = checkpoint(ckpt_path, &mut m)?;
    let Some(net) = &ckpt.explainer else {
        return Err(CliError::Config(format!(
            "{} has no explainer; train with explainer_mode joint or separate",
            ckpt_path.display()
        )));
    };
    let data = dataset(cfg, &mut m)?;
    let rows: Vec<usize> = if cfg.explain.samples.is_empty() {
        split_indices(data.len(), cfg.train.split_seed)?
            .test
            .into_iter()
            .take(cfg.explain.count)
            .collect()
    } else {
        cfg.explain.samples.clone()
    };
    if let Some(&bad) = rows.iter().find(|&&r| r >= data.len()) {
        return Err(CliError::Config(format!("sample {bad} is out of range for {} samples", data.len())));
    }
    let dir = out.join("contributions");
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let model = &ckpt.model;
    let mut summary = Vec::with_capacity(rows.len());
    for r in rows {
        let sample = &data.samples[r];
        let x = Tensor::new(
            vec![sample.length, sample.vars],
            encode_sample(sample, &ckpt.standardizer, model.config.zero_encoding),
        )?;
        let ex = explain_one(model, net, &x)?;
        let path = dir.join(format!("{r:05}_{}.csv", file_stem(&sample.id)));
        let mut w = create(&path)?;
        write_contributions(&mut w, &contribution_rows(sample, &ex)?)?;
        w.flush().map_err(io_err(&path))?;
        m.outputs.push(path.display().to_string());
        summary.push(ExplanationSummary {
            row: r,
            id: sample.id.clone(),
            label: sample.label,
            f: ex.f,
            g: ex.g,
            reconstruction: ex.reconstruction(),
            contributions: path.display().to_string(),
        });
    }
    write_json(&out.join("explanations.json"), &summary, &mut m)?;
    println!("explained {} samples into {}", summary.len(), dir.display());
    finish(m, out)
}

pub fn benchmark(cfg: &RunConfig, out: &Path) -> Result<()> {
    let mut m = manifest("benchmark", cfg);
    let data = dataset(cfg, &mut m)?;
    let timings = benchmark_neighbor_size(&data, &cfg.model, &cfg.benchmark)?;
    let path = out.join("benchmark.csv");
    let mut w = create(&path)?;
    let mut lines = vec!["neighbor,median_ms,mean_ms,std_ms,repetitions".to_string()];
    for t in &timings {
        lines.push(format!(
            "{},{:.3},{:.3},{:.3},{}",
            t.neighbor,
            t.epoch.median_ms,
            t.epoch.mean_ms,
            t.epoch.std_ms,
            t.epoch.runs_ms.len()
        ));
    }
    writeln!(w, "{}", lines.join("\n")).map_err(io_err(&path))?;
    w.flush().map_err(io_err(&path))?;
    m.outputs.push(path.display().to_string());
    write_json(&out.join("benchmark.json"), &timings, &mut m)?;
    println!("{}", lines.join("\n"));
    finish(m, out)
}

pub fn ablate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let mut m = manifest("ablate", cfg);
    let data = dataset(cfg, &mut m)?;
    let rows = ablation_run(&data, &cfg.model, &cfg.train, &AblationFlags::grid(), &cfg.ablation)?;
    let path = out.join("ablation.csv");
    let mut w = create(&path)?;
    let mut lines = vec!["locality,zero_encoding,kernelization,mean_auroc,mean_auprc,inference_median_ms,inference_std_ms".to_string()];
    for r in &rows {
        lines.push(format!(
            "{},{},{},{:.4},{:.4},{:.3},{:.3}",
            u8::from(r.flags.locality),
            u8::from(r.flags.zero_encoding),
            u8::from(r.flags.kernelization),
            r.mean_auroc,
            r.mean_auprc,
            r.inference.median_ms,
            r.inference.std_ms
        ));
    }
    writeln!(w, "{}", lines.join("\n")).map_err(io_err(&path))?;
    w.flush().map_err(io_err(&path))?;
    m.outputs.push(path.display().to_string());
    write_json(&out.join("ablation.json"), &rows, &mut m)?;
    println!("{}", lines.join("\n"));
    finish(m, out)
}
