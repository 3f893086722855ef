use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use edgenav::bench::{bench_latency, BenchReport};
use edgenav::checkpoint::{load_checkpoint, load_policy, read_checkpoint, save_checkpoint, save_policy, VERSION};
use edgenav::detector::{build_model, DetectorModel, ModelConfig};
use edgenav::distill::{compute_map, distill_student, predict, train_teacher, TrainConfig};
use edgenav::navsim::{write_trace, Action, NavEnv, Observer, TraceRecord};
use edgenav::ppo::{eval_success_rate, train_policy};
use edgenav::scenegen::{gen_dataset, load_dataset, write_dataset, Dataset, LabeledImage, CLASS_NAMES, NUM_CLASSES};
use edgenav::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::Config;
use crate::{Bench, Cli, CliError, Command, Distill, EvalMap, EvalNav, GenData, Preset, Split, TrainDetector, TrainOpts};
use crate::{InspectCkpt, PlotData, TrainPolicy};

type Res<T = ()> = Result<T, CliError>;

pub fn run(cli: Cli) -> Res {
    let mut cfg = Config::load(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    match cli.command {
        Command::GenData(a) => gen_data(&cfg, a),
        Command::TrainTeacher(a) => train_teacher_cmd(&cfg, a),
        Command::Distill(a) => distill(&cfg, a),
        Command::EvalMap(a) => eval_map(&cfg, a),
        Command::TrainPolicy(a) => train_policy_cmd(&cfg, a),
        Command::EvalNav(a) => eval_nav(&cfg, a),
        Command::Bench(a) => bench(&cfg, a),
        Command::InspectCkpt(a) => inspect(a),
        Command::PlotData(a) => plot_data(a),
    }
}

fn csv_err(path: &Path, e: csv::Error) -> CliError {
    CliError::Runtime(Error::data(path, e.to_string()))
}

#[derive(Serialize)]
struct SummaryRow {
    split: &'static str,
    class: &'static str,
    boxes: usize,
    mean_width: f64,
    mean_height: f64,
}

fn summary_rows(split: &'static str, images: &[LabeledImage]) -> Vec<SummaryRow> {
    (0..NUM_CLASSES)
        .map(|c| {
            let labels: Vec<_> = images.iter().filter_map(|i| i.label_for(c)).collect();
            let mean = |f: fn(&[f64; 4]) -> f64| {
                if labels.is_empty() {
                    0.0
                } else {
                    labels.iter().map(|l| f(&l.bbox)).sum::<f64>() / labels.len() as f64
                }
            };
            SummaryRow {
                split,
                class: CLASS_NAMES[c],
                boxes: labels.len(),
                mean_width: mean(|b| b[2] - b[0]),
                mean_height: mean(|b| b[3] - b[1]),
            }
        })
        .collect()
}

fn gen_data(cfg: &Config, a: GenData) -> Res {
    let count = a.count.unwrap_or(cfg.data.count);
    let size = a.size.unwrap_or(cfg.data.image_size);
    if count < 2 || size == 0 {
        return Err(CliError::Usage("count must be at least 2 and size positive".into()));
    }
    let (train, val) = gen_dataset(count, cfg.seed, size)?;
    let ds = Dataset::new(train, val, cfg.seed);
    write_dataset(&ds, &a.out)?;
    let path = a.out.join("summary.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
    let rows: Vec<SummaryRow> = summary_rows("train", &ds.train).into_iter().chain(summary_rows("val", &ds.val)).collect();
    for r in &rows {
        w.serialize(r).map_err(|e| csv_err(&path, e))?;
    }
    w.flush().map_err(|e| CliError::Runtime(Error::io(&path, e)))?;
    println!("wrote {} train and {} val images of {size}x{size} to {}", ds.train.len(), ds.val.len(), a.out.display());
    println!("{:<6} {:<6} {:>6} {:>10} {:>11}", "split", "class", "boxes", "mean_width", "mean_height");
    for r in &rows {
        println!("{:<6} {:<6} {:>6} {:>10.4} {:>11.4}", r.split, r.class, r.boxes, r.mean_width, r.mean_height);
    }
    Ok(())
}

fn data_size(ds: &Dataset, dir: &Path) -> Res<usize> {
    ds.manifest
        .as_ref()
        .map(|m| m.image_size)
        .or_else(|| ds.train.first().map(|i| i.size))
        .ok_or_else(|| CliError::Runtime(Error::data(dir, "dataset has no training images")))
}

fn apply_train(base: &TrainConfig, o: &TrainOpts, seed: u64) -> TrainConfig {
    let mut t = base.clone();
    t.epochs = o.epochs.unwrap_or(t.epochs);
    t.lr = o.lr.unwrap_or(t.lr);
    t.batch_size = o.batch_size.unwrap_or(t.batch_size);
    t.log_csv = o.log.clone().or(t.log_csv);
    t.verbose |= o.verbose;
    t.seed = seed;
    t
}

fn report_outcome(best_map: f64, best_epoch: usize, out: &Path) {
    println!("best val mAP@0.5 {best_map:.4} at epoch {best_epoch}; saved {}", out.display());
}

fn train_teacher_cmd(cfg: &Config, a: TrainDetector) -> Res {
    let ds = load_dataset(&a.data)?;
    let size = data_size(&ds, &a.data)?;
    let tc = apply_train(&cfg.teacher, &a.train, cfg.seed);
    let model = build_model(&ModelConfig::teacher().with_input_size(size), cfg.seed)?;
    let out = train_teacher(model, &ds, &tc)?;
    save_checkpoint(&out.model, &a.out)?;
    report_outcome(out.best_map, out.best_epoch, &a.out);
    Ok(())
}

fn distill(cfg: &Config, a: Distill) -> Res {
    let teacher = match (&a.teacher, a.no_kd) {
        (_, true) => None,
        (None, false) => return Err(CliError::Usage("teacher checkpoint not found: pass --teacher or --no-kd".into())),
        (Some(p), false) if !p.is_file() => {
            return Err(CliError::Usage(format!("teacher checkpoint not found: {}", p.display())));
        }
        (Some(p), false) => Some(load_checkpoint(p)?),
    };
    let mut kd = cfg.kd;
    kd.temperature = a.temperature.unwrap_or(kd.temperature);
    kd.lambda_kd = a.lambda_kd.unwrap_or(kd.lambda_kd);
    kd.lambda_feat = a.lambda_feat.unwrap_or(kd.lambda_feat);
    if a.no_kd {
        kd = kd.without_kd();
    }
    let ds = load_dataset(&a.data)?;
    let size = data_size(&ds, &a.data)?;
    let tc = apply_train(&cfg.student, &a.train, cfg.seed);
    let student = build_model(&ModelConfig::student().with_input_size(size), cfg.seed)?;
    let out = match &teacher {
        Some(t) => distill_student(student, t, &ds, &kd, &tc)?,
        None => distill_student(student.clone(), &student, &ds, &kd, &tc)?,
    };
    save_checkpoint(&out.model, &a.out)?;
    report_outcome(out.best_map, out.best_epoch, &a.out);
    Ok(())
}

#[derive(Serialize)]
struct DumpRecord<'a> {
    image: usize,
    detections: &'a [edgenav::detector::Detection],
}

fn eval_map(cfg: &Config, a: EvalMap) -> Res {
    let model = load_checkpoint(&a.ckpt)?;
    let ds = load_dataset(&a.data)?;
    let images = match a.split {
        Split::Train => &ds.train,
        Split::Val => &ds.val,
    };
    if images.is_empty() {
        return Err(CliError::Runtime(Error::data(&a.data, "selected split is empty")));
    }
    let preds = predict(&model, images, 0.0)?;
    let gts: Vec<_> = images.iter().map(|i| i.labels.clone()).collect();
    let map = compute_map(&preds, &gts, model.cfg.num_classes, 0.5);
    if let Some(path) = &a.dump {
        let thr = cfg.kd.conf_thresholds.0;
        let mut text = String::new();
        for (i, p) in preds.iter().enumerate() {
            let kept: Vec<_> = p.iter().filter(|d| d.confidence >= thr).copied().collect();
            text.push_str(&serde_json::to_string(&DumpRecord { image: i, detections: &kept }).expect("serializes"));
            text.push('\n');
        }
        fs::write(path, text).map_err(|e| CliError::Runtime(Error::io(path, e)))?;
    }
    println!("mAP@0.5 {map:.6} on {} images", images.len());
    Ok(())
}

fn load_observer_model(path: Option<&PathBuf>) -> Res<Option<DetectorModel>> {
    path.map(|p| load_checkpoint(p)).transpose().map_err(CliError::from)
}

fn train_policy_cmd(cfg: &Config, a: TrainPolicy) -> Res {
    let mut env = cfg.env.clone();
    env.num_objects = a.objects.unwrap_or(env.num_objects);
    env.validate()?;
    let mut pc = cfg.ppo.clone();
    pc.total_steps = a.steps.unwrap_or(pc.total_steps);
    pc.seed = cfg.seed;
    let det = load_observer_model(a.detector.as_ref())?;
    let observer = match &det {
        Some(m) => {
            env.image_size = m.cfg.input_size;
            Observer::Detector(m)
        }
        None => Observer::Oracle,
    };
    let out = train_policy(&env, &observer, &pc, a.log.as_ref(), a.verbose)?;
    save_policy(&out.policy, &a.out)?;
    println!(
        "{} objects: success over the last 100 episodes {:.3} after {} steps; saved {}",
        env.num_objects,
        out.final_success_rate,
        out.history.last().map_or(0, |r| r.steps),
        a.out.display()
    );
    Ok(())
}

fn eval_nav(cfg: &Config, a: EvalNav) -> Res {
    let policy = load_policy(&a.policy)?;
    let mut env_cfg = cfg.env.clone();
    env_cfg.num_objects = a.objects.unwrap_or(env_cfg.num_objects);
    env_cfg.validate()?;
    let det = load_observer_model(a.detector.as_ref())?;
    let observer = match &det {
        Some(m) => {
            env_cfg.image_size = m.cfg.input_size;
            Observer::Detector(m)
        }
        None => Observer::Oracle,
    };
    let rate = eval_success_rate(&env_cfg, &policy, a.episodes, cfg.seed, &observer)?;
    if let Some(path) = &a.trace {
        let mut env = NavEnv::new(env_cfg.clone(), cfg.seed)?;
        let st = env.state.clone();
        let mut obs = env.reset_to(st, &observer)?.state_vector;
        // Greedy actions never draw from the generator.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut records = Vec::new();
        loop {
            let action = Action::from_index(policy.act(&obs, &mut rng, true)?.0)?;
            let res = env.step(action, &observer)?;
            records.push(TraceRecord {
                step: env.state.step_count,
                action,
                reward: res.reward,
                parts: res.parts,
                state_vector: obs.clone(),
            });
            if res.done {
                break;
            }
            obs = res.observation.state_vector;
        }
        write_trace(path, &records)?;
    }
    println!("{} objects: greedy success {rate:.3} over {} episodes", env_cfg.num_objects, a.episodes);
    Ok(())
}

fn bench(cfg: &Config, a: Bench) -> Res {
    if a.threads != 1 {
        return Err(CliError::Usage(format!("--threads {}: only single-threaded execution is supported", a.threads)));
    }
    if a.ckpt.is_empty() && a.model.is_empty() {
        return Err(CliError::Usage("nothing to benchmark: pass --ckpt or --model".into()));
    }
    let runs = a.runs.unwrap_or(cfg.bench.runs);
    let warmup = a.warmup.unwrap_or(cfg.bench.warmup);
    let size = a.size.unwrap_or(cfg.bench.input_size);
    let mut reports = Vec::new();
    for p in &a.ckpt {
        let model = load_checkpoint(p)?;
        let name = p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned());
        reports.push(bench_latency(&model, &name, runs, warmup)?);
    }
    for &m in &a.model {
        let (name, base) = match m {
            Preset::Student => ("student", ModelConfig::student()),
            Preset::Teacher => ("teacher", ModelConfig::teacher()),
        };
        let model = build_model(&base.with_input_size(size), cfg.seed)?;
        reports.push(bench_latency(&model, name, runs, warmup)?);
    }
    let mut csv = format!("{}\n", BenchReport::CSV_HEADER);
    for r in &reports {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    print!("{csv}");
    println!();
    print!("{}", BenchReport::table(&reports));
    if let Some(path) = &a.csv {
        fs::write(path, &csv).map_err(|e| CliError::Runtime(Error::io(path, e)))?;
    }
    Ok(())
}

fn inspect(a: InspectCkpt) -> Res {
    let ck = read_checkpoint(&a.ckpt)?;
    let mut out = std::io::stdout().lock();
    let total: usize = ck.params.num_params();
    let _ = writeln!(out, "file      {}", a.ckpt.display());
    let _ = writeln!(out, "format    v{VERSION}, checksum ok");
    let _ = writeln!(out, "kind      {}", ck.kind);
    let _ = writeln!(out, "config    {}", ck.config);
    if let Some(ns) = ck.norm_stats {
        let _ = writeln!(out, "norm      mean {:?} std {:?}", ns.mean, ns.std);
    }
    let _ = writeln!(out, "tensors   {} ({total} parameters)", ck.params.len());
    for p in ck.params.iter() {
        let _ = writeln!(out, "  {:<40} {:?}", p.name, p.shape);
    }
    Ok(())
}

fn plot_data(a: PlotData) -> Res {
    let mut r = csv::Reader::from_path(&a.csv).map_err(|e| csv_err(&a.csv, e))?;
    let headers = r.headers().map_err(|e| csv_err(&a.csv, e))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Usage(format!("column `{name}` not in {}", a.csv.display())))
    };
    let mut cols = vec![col(&a.x)?];
    for y in &a.y {
        cols.push(col(y)?);
    }
    println!("# {} {}", a.x, a.y.join(" "));
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(&a.csv, e))?;
        let vals: Vec<&str> = cols.iter().map(|&i| rec.get(i).unwrap_or("nan")).collect();
        println!("{}", vals.join(" "));
    }
    Ok(())
}
