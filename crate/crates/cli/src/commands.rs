use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::Context as _;
use popt::data::{write_labels, write_store, DatasetManifest};
use popt::decode::{
    channel_scaling_sweep, finetune as run_finetune, predict_windows, rank_channels, roc_auc, sample_efficiency_sweep,
    train_baseline, write_curve_csv, CurveRow, Decoder, EvalReport, Init,
};
use popt::engine::Tensor;
use popt::interpret::{
    channel_influence, group_contrast, model_rollout, scaled_attention_weight, upper_triangle_spearman,
};
use popt::model::{load_checkpoint, save_checkpoint, Checkpoint, PopT};
use popt::pretrain::{run_pretraining, write_log_csv, PretrainData, PretrainError};

use crate::config::{BaselineName, DecoderName, RunConfig, SweepKind};
use crate::data::{load, Subject};
use crate::{rundir, CliError, RunArgs};

fn read_config(args: &RunArgs) -> anyhow::Result<RunConfig> {
    if !args.config.exists() {
        return Err(CliError::MissingFile(args.config.clone()).into());
    }
    let text = std::fs::read_to_string(&args.config).with_context(|| format!("reading {}", args.config.display()))?;
    let mut cfg = RunConfig::parse(&text).with_context(|| format!("in {}", args.config.display()))?;
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn seeds(cfg: &RunConfig, args: &RunArgs) -> Vec<u64> {
    match args.seed {
        Some(s) => vec![s],
        None => cfg.seeds.clone(),
    }
}

fn load_model(path: &Path) -> anyhow::Result<PopT<f32>> {
    if !path.exists() {
        return Err(CliError::MissingFile(path.to_path_buf()).into());
    }
    Ok(load_checkpoint::<f32>(path).with_context(|| format!("loading {}", path.display()))?.model)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> anyhow::Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn write_report(dir: &Path, report: &EvalReport) -> anyhow::Result<()> {
    std::fs::write(dir.join("report.csv"), format!("{}\n{}\n", EvalReport::CSV_HEADER, report.csv_row()))?;
    write_json(&dir.join("report.json"), report)
}

fn extra(parts: &[(&str, String)]) -> String {
    parts.iter().map(|(k, v)| format!("\n{k}={v}")).collect()
}

fn checkpoint_arg(path: Option<&Path>) -> String {
    path.map(|p| p.display().to_string()).unwrap_or_default()
}

pub fn gen_synthetic(args: &RunArgs) -> anyhow::Result<()> {
    let cfg = read_config(args)?;
    if cfg.data.synthetic.is_none() {
        return Err(CliError::Schema("gen-synthetic needs [data.synthetic]".into()).into());
    }
    let subject = load(&cfg)?;
    let dir = rundir::create(&cfg.output_dir, "gen-synthetic", &cfg, "", None)?;
    write_store(&subject.store, &dir.join("store.popt"))?;
    subject.layout.write_csv(&dir.join("layout.csv"))?;
    let labels: BTreeMap<usize, u8> = subject.labels.iter().copied().enumerate().collect();
    write_labels(&labels, &dir.join("labels.csv"))?;
    if let Some((coupling, block_of)) = &subject.truth {
        let mut f = std::fs::File::create(dir.join("coupling.csv"))?;
        let ids: Vec<&str> = subject.layout.channels.iter().map(|c| c.id.as_str()).collect();
        writeln!(f, "channel,block,{}", ids.join(","))?;
        for (i, row) in coupling.iter().enumerate() {
            let vals: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(f, "{},{},{}", ids[i], block_of[i], vals.join(","))?;
        }
    }
    let manifest = DatasetManifest {
        layout: PathBuf::from("layout.csv"),
        store: PathBuf::from("store.popt"),
        n_windows: subject.store.n_windows(),
        splits: Some(subject.task_splits.clone()),
        labels: Some(PathBuf::from("labels.csv")),
    };
    manifest.write(&dir.join("manifest.json"))?;
    Ok(())
}

pub fn pretrain(args: &RunArgs) -> anyhow::Result<()> {
    let cfg = read_config(args)?;
    let subject = load(&cfg)?;
    let model = cfg.model.resolve(subject.store.d_emb());
    for seed in seeds(&cfg, args) {
        let pc = cfg.pretrain.resolve(model.clone(), subject.layout.len(), seed);
        let dir = rundir::create(&cfg.output_dir, "pretrain", &cfg, "", Some(seed))?;
        write_json(&dir.join("pretrain.json"), &pc)?;
        let data = PretrainData {
            store: &subject.store,
            layout: &subject.layout,
            splits: &subject.pretrain_splits,
        };
        match run_pretraining::<f32>(&pc, data) {
            Ok(out) => {
                save_checkpoint(&dir.join("checkpoint.ptck"), &out.checkpoint)?;
                write_log_csv(&dir.join("metrics.csv"), &out.log)?;
                let last = out.log.last();
                write_json(
                    &dir.join("summary.json"),
                    &serde_json::json!({
                        "best_step": out.best_step,
                        "best_val_l": out.best_val,
                        "final_val_l_n": last.map(|r| r.val_l_n),
                        "final_val_l_c": last.map(|r| r.val_l_c),
                    }),
                )?;
            }
            Err(PretrainError::Diverged { step, what, last_good }) => {
                save_checkpoint::<f64>(&dir.join("last_good.ptck"), &last_good)?;
                return Err(CliError::Diverged(format!("{what} at step {step}; last good weights in {}", dir.display())).into());
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok(())
}

pub fn finetune(args: &RunArgs, checkpoint: Option<&Path>, probe: bool) -> anyhow::Result<()> {
    let cfg = read_config(args)?;
    let subject = load(&cfg)?;
    let pretrained = checkpoint.map(load_model).transpose()?;
    let fresh = cfg.model.resolve(subject.store.d_emb());
    let command = if probe { "probe" } else { "finetune" };
    for seed in seeds(&cfg, args) {
        let task = subject.task_for_seed(&cfg, seed)?;
        let fc = if probe {
            cfg.finetune.resolve_probe(seed)
        } else {
            cfg.finetune.resolve(seed)
        };
        let init = match &pretrained {
            Some(m) => Init::Pretrained(m),
            None => Init::Fresh(&fresh),
        };
        let dir = rundir::create(
            &cfg.output_dir,
            command,
            &cfg,
            &extra(&[("checkpoint", checkpoint_arg(checkpoint))]),
            Some(seed),
        )?;
        let (model, report) = run_finetune(init, &task, &fc)?;
        write_report(&dir, &report)?;
        if !probe {
            save_checkpoint(&dir.join("model.ptck"), &Checkpoint::new(model))?;
        }
        log::info!("{command} seed {seed}: test roc_auc {:.4}", report.roc_auc);
    }
    Ok(())
}

pub fn baseline(args: &RunArgs, kind: Option<BaselineName>) -> anyhow::Result<()> {
    let cfg = read_config(args)?;
    let subject = load(&cfg)?;
    let name = kind.unwrap_or(cfg.baseline.kind);
    let kind = cfg.baseline.kind(name);
    let tag = match name {
        BaselineName::Linear => "baseline-linear",
        BaselineName::DeepNn => "baseline-deep-nn",
    };
    for seed in seeds(&cfg, args) {
        let task = subject.task_for_seed(&cfg, seed)?;
        let dir = rundir::create(&cfg.output_dir, tag, &cfg, "", Some(seed))?;
        let (_, report) = train_baseline::<f32>(kind, &task, &cfg.baseline.resolve(seed))?;
        write_report(&dir, &report)?;
        log::info!("{tag} seed {seed}: test roc_auc {:.4}", report.roc_auc);
    }
    Ok(())
}

pub fn sweep(args: &RunArgs, checkpoint: Option<&Path>, jobs: usize) -> anyhow::Result<()> {
    let cfg = read_config(args)?;
    let subject = load(&cfg)?;
    let pretrained = checkpoint.map(load_model).transpose()?;
    let seeds = seeds(&cfg, args);
    let sc = &cfg.sweep;
    let fresh = cfg.model.resolve(subject.store.d_emb());
    let decoder: Decoder<f32> = match sc.decoder {
        DecoderName::Popt => Decoder::PopT {
            pretrained: pretrained.as_ref(),
            fresh,
            config: cfg.finetune.resolve(0),
        },
        DecoderName::Linear | DecoderName::DeepNn => {
            let name = if sc.decoder == DecoderName::Linear {
                BaselineName::Linear
            } else {
                BaselineName::DeepNn
            };
            Decoder::Baseline {
                kind: cfg.baseline.kind(name),
                config: cfg.baseline.resolve(0),
            }
        }
    };
    let dir = rundir::create(
        &cfg.output_dir,
        "sweep",
        &cfg,
        &extra(&[("checkpoint", checkpoint_arg(checkpoint))]),
        None,
    )?;
    let base = subject.task_for_seed(&cfg, seeds[0])?;
    let ranked: Vec<usize> = match sc.kind {
        SweepKind::Channels => {
            let ranking = rank_channels::<f32>(&base, &cfg.baseline.resolve(seeds[0]))?;
            let mut f = std::fs::File::create(dir.join("ranking.csv"))?;
            writeln!(f, "channel,val_roc_auc")?;
            for (c, auc) in &ranking {
                writeln!(f, "{},{auc}", subject.layout.channels[base.channels[*c]].id)?;
            }
            ranking.iter().map(|&(c, _)| base.channels[c]).collect()
        }
        SweepKind::Samples => Vec::new(),
    };
    let run_seed = |seed: u64| -> anyhow::Result<Vec<CurveRow>> {
        let task = subject.task_for_seed(&cfg, seed)?;
        Ok(match sc.kind {
            SweepKind::Channels => channel_scaling_sweep(&decoder, &task, &ranked, &sc.sizes, &[seed])?,
            SweepKind::Samples => sample_efficiency_sweep(&decoder, &task, &sc.fractions, &[seed])?,
        })
    };
    let mut rows = Vec::new();
    for chunk in seeds.chunks(jobs.max(1)) {
        let results: Vec<anyhow::Result<Vec<CurveRow>>> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk.iter().map(|&seed| s.spawn(move || run_seed(seed))).collect();
            handles.into_iter().map(|h| h.join().expect("sweep worker panicked")).collect()
        });
        for r in results {
            rows.extend(r?);
        }
    }
    rows.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.seed.cmp(&b.seed)));
    let x_name = match sc.kind {
        SweepKind::Channels => "ensemble_size",
        SweepKind::Samples => "train_fraction",
    };
    write_curve_csv(&dir.join("curve.csv"), x_name, &rows)?;
    Ok(())
}

/// `n` evenly spaced windows of `range`.
fn spaced(range: &std::ops::Range<usize>, n: usize) -> Vec<usize> {
    let len = range.len();
    if len == 0 || n == 0 {
        return Vec::new();
    }
    let n = n.min(len);
    (0..n).map(|i| range.start + i * len / n).collect()
}

fn matrix_csv(ids: &[&str], m: &[Vec<f64>]) -> String {
    let mut out = format!("channel,{}\n", ids.join(","));
    for (i, row) in m.iter().enumerate() {
        let vals: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&format!("{},{}\n", ids[i], vals.join(",")));
    }
    out
}

/// Group index per channel: planted blocks when known, else region labels.
fn groups(subject: &Subject, channels: &[usize]) -> Option<Vec<usize>> {
    if let Some((_, block_of)) = &subject.truth {
        return Some(channels.iter().map(|&c| block_of[c]).collect());
    }
    let regions: Vec<&str> = channels
        .iter()
        .map(|&c| subject.layout.channels[c].region.as_deref())
        .collect::<Option<_>>()?;
    let mut names: Vec<&str> = regions.clone();
    names.sort_unstable();
    names.dedup();
    Some(regions.iter().map(|r| names.binary_search(r).expect("present")).collect())
}

pub fn influence(args: &RunArgs, checkpoint: &Path) -> anyhow::Result<()> {
    let cfg = read_config(args)?;
    let subject = load(&cfg)?;
    let model = load_model(checkpoint)?;
    let task = subject.task(&cfg)?;
    let windows = spaced(&subject.pretrain_splits.test, cfg.interpret.n_samples);
    let dir = rundir::create(
        &cfg.output_dir,
        "influence",
        &cfg,
        &extra(&[("checkpoint", checkpoint_arg(Some(checkpoint)))]),
        None,
    )?;
    let m = channel_influence(&model, &subject.store, &subject.layout, &task.channels, &windows)?;
    std::fs::write(dir.join("influence.csv"), m.to_csv(&subject.layout))?;
    let sym = m.symmetrized();
    let ids: Vec<&str> = task.channels.iter().map(|&c| subject.layout.channels[c].id.as_str()).collect();
    std::fs::write(dir.join("influence_symmetrized.csv"), matrix_csv(&ids, &sym))?;
    let mut summary = serde_json::json!({ "n_samples": windows.len() });
    if let Some(g) = groups(&subject, &task.channels) {
        let (within, across) = group_contrast(&sym, &g);
        summary["within_group_mean"] = within.into();
        summary["across_group_mean"] = across.into();
    }
    if let Some((coupling, _)) = &subject.truth {
        let sub: Vec<Vec<f64>> =
            task.channels.iter().map(|&i| task.channels.iter().map(|&j| coupling[i][j]).collect()).collect();
        summary["spearman_vs_coupling"] = upper_triangle_spearman(&sym, &sub).into();
    }
    write_json(&dir.join("summary.json"), &summary)
}

pub fn attention(args: &RunArgs, checkpoint: &Path) -> anyhow::Result<()> {
    let cfg = read_config(args)?;
    let subject = load(&cfg)?;
    let model = load_model(checkpoint)?;
    let task = subject.task(&cfg)?;
    let dir = rundir::create(
        &cfg.output_dir,
        "attention",
        &cfg,
        &extra(&[("checkpoint", checkpoint_arg(Some(checkpoint)))]),
        None,
    )?;
    let probs = predict_windows(&model, &task, &task.test)?;
    let auc = roc_auc(&probs, &task.labels_of(&task.test))?;
    let windows = spaced(&(0..task.test.len()), cfg.interpret.n_samples);
    let n = task.channels.len() + 1;
    let mut mean = Tensor::<f64>::zeros(&[n, n]);
    for &i in &windows {
        let tokens = model.tokens(&subject.store, &subject.layout, &task.token_specs(task.test[i]))?;
        mean.add_assign(&model_rollout(&model, &tokens)?);
    }
    let mean = mean.map(|v| v / windows.len() as f64);
    let regions: Vec<Option<String>> = task.channels.iter().map(|&c| subject.layout.channels[c].region.clone()).collect();
    let contribution = scaled_attention_weight(&mean, 0, auc, Some(&regions))?;
    let mut f = std::fs::File::create(dir.join("attention.csv"))?;
    writeln!(f, "channel,region,raw,normalized,scaled")?;
    for (k, &c) in task.channels.iter().enumerate() {
        let ch = &subject.layout.channels[c];
        writeln!(
            f,
            "{},{},{},{},{}",
            ch.id,
            ch.region.as_deref().unwrap_or(""),
            contribution.raw[k],
            contribution.normalized[k],
            contribution.scaled[k]
        )?;
    }
    let mut f = std::fs::File::create(dir.join("regions.csv"))?;
    writeln!(f, "region,q75_scaled")?;
    for (r, v) in &contribution.regions {
        writeln!(f, "{r},{v}")?;
    }
    write_json(
        &dir.join("summary.json"),
        &serde_json::json!({ "test_roc_auc": auc, "degenerate": contribution.degenerate, "n_samples": windows.len() }),
    )
}
