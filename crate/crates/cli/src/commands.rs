use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::Context;
use fakemap::clustering::{clustered_accuracy, extract_features, separation_margin};
use fakemap::dataset::{family_counts, load_dataset, manifest_digest, write_dataset, Split};
use fakemap::evaluate::{evaluate, predict};
use fakemap::losses::MapLoss;
use fakemap::render::{gray_tile, grid, line_plot, overlay};
use fakemap::robustness::{disorganize, quadrant_mass, sweep, DegradationKind, SWEEP_METRICS};
use fakemap::texturegen::{make_dataset, Family};
use fakemap::training::{self, AugmentPolicy, Backbone};
use fakemap::{LocatorNetwork, SamplePair};
use log::info;
use ndarray::Array2;
use serde_json::json;

use crate::config::{write_run_record, RunConfig};
use crate::failure::{Failure, Kind};
use crate::{BackboneArg, ClusterArgs, DatasetArgs, EvalArgs, LossArg, ModelArgs, RobustArgs, SplitArg, TrainArgs};

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    Failure::new(Kind::Config, msg).into()
}

fn print_json(v: &serde_json::Value) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(v)?;
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

pub fn dataset(mut cfg: RunConfig, a: DatasetArgs) -> anyhow::Result<()> {
    let g = &mut cfg.dataset.generator;
    if let Some(v) = a.count_real {
        g.count_real = v;
    }
    if let Some(v) = a.count_fake {
        g.count_fake = v;
    }
    if let Some(v) = a.size {
        g.image_size = v;
    }
    if let Some(fams) = &a.families {
        g.families = fams
            .iter()
            .map(|f| Family::from_str(f.trim()))
            .collect::<Result<_, _>>()
            .map_err(|e| config_err(e.to_string()))?;
    }
    if a.paired_reals {
        g.paired_reals = true;
    }
    if let Some(v) = a.entire_fraction {
        g.entire_fraction = v;
    }
    cfg.validate()?;
    let out = cfg.output_dir()?.to_path_buf();
    let samples = make_dataset(&cfg.dataset.generator)?;
    let split_seed = cfg.dataset.split_seed.unwrap_or(cfg.dataset.generator.seed);
    let entries = write_dataset(&out, &samples, split_seed)?;
    cfg.manifest = Some(out.clone());
    write_run_record(&out, "dataset", &cfg)?;
    let per_split: Vec<usize> = Split::ALL
        .iter()
        .map(|s| entries.iter().filter(|e| e.split == *s).count())
        .collect();
    print_json(&json!({
        "manifest": fakemap::dataset::manifest_path(&out),
        "samples": entries.len(),
        "families": family_counts(&entries),
        "splits": {"train": per_split[0], "val": per_split[1], "test": per_split[2]},
        "manifest_sha256": manifest_digest(&out)?,
    }))
}

fn parse_augment(s: &str) -> anyhow::Result<AugmentPolicy> {
    match s {
        "partial" => Ok(AugmentPolicy::partial()),
        "none" => Ok(AugmentPolicy::none()),
        "both" => Ok(AugmentPolicy::new(1.0, 1.0)),
        other => {
            let (r, f) = other
                .split_once(':')
                .ok_or_else(|| config_err(format!("augment `{other}`: expected partial, none, both or P_REAL:P_FAKE")))?;
            let p = |v: &str| v.trim().parse::<f64>().map_err(|_| config_err(format!("augment probability `{v}`")));
            Ok(AugmentPolicy::new(p(r)?, p(f)?))
        }
    }
}

fn data_path(cfg: &mut RunConfig, data: &Option<PathBuf>) -> anyhow::Result<PathBuf> {
    if let Some(d) = data {
        cfg.manifest = Some(d.clone());
    }
    Ok(cfg.manifest_path()?.to_path_buf())
}

pub fn train(mut cfg: RunConfig, a: TrainArgs) -> anyhow::Result<()> {
    let data = data_path(&mut cfg, &a.data.data)?;
    let t = &mut cfg.train;
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.lr {
        t.lr = v;
    }
    if let Some(v) = a.input_size {
        t.input_size = v;
    }
    if let Some(b) = a.backbone {
        t.backbone = match b {
            BackboneArg::Compact => Backbone::Compact,
            BackboneArg::Standard => Backbone::Standard,
        };
    }
    if let Some(l) = a.loss {
        t.loss.map_loss = match l {
            LossArg::L1 => MapLoss::L1,
            LossArg::L2 => MapLoss::L2,
            LossArg::Focal => MapLoss::Focal,
            LossArg::Dice => MapLoss::Dice,
        };
    }
    if a.no_attention {
        t.use_attention = false;
    }
    if let Some(s) = &a.augment {
        t.augment = parse_augment(s)?;
    }
    cfg.validate()?;
    let out = cfg.output_dir()?.to_path_buf();
    let loaded = load_dataset(&data, Some(&[Split::Train, Split::Val]))?;
    let (train_set, val_set): (Vec<_>, Vec<_>) = loaded.into_iter().partition(|(s, _)| *s == Split::Train);
    let train_set: Vec<SamplePair> = train_set.into_iter().map(|(_, s)| s).collect();
    let val_set: Vec<SamplePair> = val_set.into_iter().map(|(_, s)| s).collect();
    if train_set.is_empty() {
        return Err(Failure::new(Kind::Data, "the manifest has no training samples").into());
    }
    write_run_record(&out, "train", &cfg)?;
    info!("training on {} samples, validating on {}", train_set.len(), val_set.len());
    let ckpt = out.join("checkpoints");
    let outcome = training::train(&train_set, &val_set, &cfg.train, Some(&ckpt))?;
    let final_dir = out.join("final");
    outcome
        .network
        .save(&final_dir, cfg.train.seed, Some(cfg.train.epochs - 1), serde_json::to_value(outcome.history.last())?)?;
    write(&out.join("history.json"), serde_json::to_string_pretty(&outcome.history)?)?;
    let last = outcome.history.last();
    print_json(&json!({
        "final_train_loss": outcome.final_loss(),
        "final_val_acc": last.and_then(|r| r.val_acc),
        "best_epoch": outcome.best_epoch,
        "best_checkpoint": ckpt.join(training::BEST_LINK),
        "final_checkpoint": final_dir,
    }))
}

fn split_filter(split: SplitArg) -> Option<&'static [Split]> {
    match split {
        SplitArg::Train => Some(&[Split::Train]),
        SplitArg::Val => Some(&[Split::Val]),
        SplitArg::Test => Some(&[Split::Test]),
        SplitArg::All => None,
    }
}

fn load_model(cfg: &mut RunConfig, m: &ModelArgs) -> anyhow::Result<(LocatorNetwork, Vec<SamplePair>)> {
    let data = data_path(cfg, &m.data.data)?;
    if let Some(c) = &m.checkpoint {
        cfg.checkpoint = Some(c.clone());
    }
    let (net, _) = LocatorNetwork::load(cfg.checkpoint_path()?)?;
    let samples: Vec<SamplePair> = load_dataset(&data, split_filter(m.split))?.into_iter().map(|(_, s)| s).collect();
    if samples.is_empty() {
        return Err(Failure::new(Kind::Data, format!("split {:?} of {} is empty", m.split, data.display())).into());
    }
    Ok((net, samples))
}

fn file_stem(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

pub fn eval(mut cfg: RunConfig, a: EvalArgs) -> anyhow::Result<()> {
    if let Some(t) = a.threshold {
        cfg.eval.threshold = t;
    }
    if let Some(c) = a.cutoff {
        cfg.eval.cutoff = c;
    }
    cfg.validate()?;
    let out = cfg.output_dir()?.to_path_buf();
    let (net, samples) = load_model(&mut cfg, &a.model)?;
    write_run_record(&out, "eval", &cfg)?;
    let outcome = evaluate(&net, &samples, &cfg.eval, &cfg.digest()?)?;
    write(&out.join("report.csv"), outcome.report.to_csv())?;
    let mut rows = String::from("id,label,score,predicted,coss,psnr,ssim,iou,dice,pbca,iinc,in_mask_mean,out_mask_mean\n");
    for r in &outcome.samples {
        let m = &r.metrics;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        rows.push_str(&format!(
            "{},{:?},{},{:?},{},{},{},{},{},{},{},{},{}\n",
            r.id,
            r.label,
            r.score,
            r.predicted,
            m.coss,
            m.psnr,
            m.ssim,
            m.iou,
            m.dice,
            m.pbca,
            m.iinc,
            opt(r.in_mask_mean),
            opt(r.out_mask_mean)
        ));
    }
    write(&out.join("samples.csv"), rows)?;
    for ((s, map), _) in samples.iter().zip(&outcome.maps).zip(0..a.max_images) {
        let stem = file_stem(&s.id);
        let maps_dir = out.join("maps");
        fs::create_dir_all(&maps_dir)?;
        map.save_png(maps_dir.join(format!("{stem}.png")))?;
        let ov = overlay(&s.input, map)?;
        let ov_path = out.join("overlays").join(format!("{stem}.png"));
        fs::create_dir_all(ov_path.parent().expect("has parent"))?;
        ov.save(&ov_path).with_context(|| format!("writing {}", ov_path.display()))?;
    }
    let doc = json!({
        "report": outcome.report,
        "fake_localization": outcome.fake_localization,
        "mask_contrast_rate": outcome.mask_contrast_rate(),
    });
    write(&out.join("report.json"), serde_json::to_string_pretty(&doc)?)?;
    print_json(&doc)
}

pub fn cluster(mut cfg: RunConfig, a: ClusterArgs) -> anyhow::Result<()> {
    if let Some(r) = a.runs {
        cfg.cluster.runs = r;
    }
    cfg.validate()?;
    let out = cfg.output_dir()?.to_path_buf();
    let (net, samples) = load_model(&mut cfg, &a.model)?;
    write_run_record(&out, "cluster", &cfg)?;
    let features = extract_features(&net, &samples)?;
    let seed = cfg.seed.unwrap_or(0);
    let report = clustered_accuracy(&features, cfg.cluster.runs, seed)?;
    let mut correct = 0usize;
    for s in &samples {
        let (_, score) = predict(&net, &s.input)?;
        correct += (fakemap::locator::classify(score, cfg.eval.cutoff) == s.label) as usize;
    }
    let emb = Array2::from_shape_fn((report.embedding.len(), 2), |(i, j)| report.embedding[i][j]);
    let margin = report.truth.as_ref().map(|t| separation_margin(&emb, t));
    write(&out.join("embedding.csv"), report.embedding_csv())?;
    let doc = json!({
        "runs": report.runs,
        "mean": report.mean,
        "std": report.std,
        "classifier_acc": correct as f64 / samples.len() as f64,
        "separation_margin": margin,
        "reducer": report.reducer,
        "perplexity": report.perplexity,
        "iterations": report.iterations,
        "samples": samples.len(),
    });
    write(&out.join("cluster.json"), serde_json::to_string_pretty(&doc)?)?;
    print_json(&doc)
}

/// Three quadrant shuffles shown next to the unshuffled input.
const SHUFFLES: [[usize; 4]; 3] = [[3, 2, 1, 0], [1, 0, 3, 2], [2, 0, 3, 1]];

fn argmax4(v: [f64; 4]) -> usize {
    (0..4).fold(0, |b, i| if v[i] > v[b] { i } else { b })
}

fn disorganize_report(net: &LocatorNetwork, samples: &[SamplePair], count: usize, out: &Path) -> anyhow::Result<serde_json::Value> {
    let fakes: Vec<&SamplePair> = samples
        .iter()
        .filter(|s| s.label.is_fake() && s.input.dims().0 % 2 == 0 && s.input.dims().1 % 2 == 0)
        .take(count)
        .collect();
    if fakes.is_empty() {
        return Err(Failure::new(Kind::Data, "disorganization needs fakes with even image sides").into());
    }
    let mut rows = Vec::new();
    let mut csv = String::from("id,permutation,gt_quadrant,predicted_quadrant\n");
    let (mut agree, mut total) = (0usize, 0usize);
    for s in fakes {
        let mut row = Vec::new();
        for perm in std::iter::once(fakemap::robustness::IDENTITY_PERMUTATION).chain(SHUFFLES) {
            let (img, gt) = disorganize(&s.input, &s.gt, perm)?;
            let (pred, _) = predict(net, &img)?;
            let (g, p) = (argmax4(quadrant_mass(&gt)), argmax4(quadrant_mass(&pred)));
            csv.push_str(&format!("{},{},{g},{p}\n", s.id, perm.map(|q| q.to_string()).join("")));
            agree += (g == p) as usize;
            total += 1;
            row.push(img.to_rgb8());
            row.push(gray_tile(&gt));
            row.push(gray_tile(&pred));
        }
        rows.push(row);
    }
    let path = out.join("disorganize.png");
    grid(&rows)?.save(&path).with_context(|| format!("writing {}", path.display()))?;
    write(&out.join("disorganize.csv"), csv)?;
    Ok(json!({"grid": path, "quadrant_agreement": agree as f64 / total as f64, "cases": total}))
}

pub fn robust(mut cfg: RunConfig, a: RobustArgs) -> anyhow::Result<()> {
    if let Some(k) = &a.kind {
        cfg.robust.kind = DegradationKind::from_str(k).map_err(|e| config_err(e.to_string()))?;
    }
    if let Some(g) = a.grid {
        cfg.robust.grid = Some(g);
    }
    cfg.validate()?;
    let out = cfg.output_dir()?.to_path_buf();
    let (net, samples) = load_model(&mut cfg, &a.model)?;
    write_run_record(&out, "robust", &cfg)?;
    let kind = cfg.robust.kind;
    let grid_values = cfg.robust.grid.clone().unwrap_or_else(|| kind.default_grid());
    let curve = sweep(&net, &samples, kind, &grid_values, cfg.seed.unwrap_or(0))?;
    let name = kind.name();
    write(&out.join(format!("robust_{name}.csv")), curve.to_csv())?;
    write(&out.join(format!("robust_{name}.json")), serde_json::to_string_pretty(&curve)?)?;
    let series: Vec<(String, Vec<(f64, f64)>)> = SWEEP_METRICS
        .iter()
        .map(|m| {
            let pts = curve
                .points
                .iter()
                .zip(curve.gammas(m))
                .filter_map(|((p, _), g)| g.map(|g| (*p, g)))
                .collect();
            (m.to_string(), pts)
        })
        .collect();
    let plot_path = out.join(format!("robust_{name}.png"));
    match line_plot(&series, 480, 320) {
        Ok(img) => img.save(&plot_path).with_context(|| format!("writing {}", plot_path.display()))?,
        Err(e) => log::warn!("no plot: {e}"),
    }
    let dis = if a.disorganize {
        Some(disorganize_report(&net, &samples, cfg.robust.disorganize_samples, &out)?)
    } else {
        None
    };
    print_json(&json!({
        "kind": name,
        "grid": grid_values,
        "rows": curve.rows,
        "jpeg_codec": curve.jpeg_codec,
        "disorganize": dis,
    }))
}
