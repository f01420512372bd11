use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use stegozoo::bitview::Float32Word;
use stegozoo::detectkit::{
    evaluate_detector, f1_svg, run_experiment, split_dataset, train_detector, EvalReport, ExperimentConfig, Method,
};
use stegozoo::featurex::{
    benign_partition, build_dataset, train_autoencoder, AeConfig, AutoencoderModel, Extractor, FeatureDataset,
    FeatureKind, GradTarget, AE_TRAIN_FRACTION,
};
use stegozoo::stegattack::{capacity, extract as extract_bits, Payload};
use stegozoo::tensorstore::{Arch, ModelRecord};
use stegozoo::zooforge::{
    attack_zoo, attacked_dir, attacked_levels, benign_dir, generate_zoo, load_models, save_attacked, save_zoo,
    ZooManifest,
};

use crate::args::{
    AttackArgs, DetectEvalArgs, DetectTrainArgs, ExtractArgs, FeaturesArgs, InspectArgs, ReportArgs, ZooGenArgs,
};
use crate::runconfig::{self, resolve_seed, RunConfig, SeedRecord};
use crate::CliError;

pub struct Context {
    pub home: PathBuf,
    pub strict: bool,
}

impl Context {
    fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() { p.to_path_buf() } else { self.home.join(p) }
    }
}

const AE_FILE: &str = "autoencoder.mzw";

fn config<T: std::fmt::Display>(msg: T) -> CliError {
    CliError::Config(msg.to_string())
}

fn load_manifest(zoo: &Path) -> Result<ZooManifest, CliError> {
    let path = zoo.join("manifest.json");
    if !path.exists() {
        return Err(config(format!("{} is not a zoo directory (no manifest.json)", zoo.display())));
    }
    Ok(ZooManifest::load(path)?)
}

pub fn zoo_gen(ctx: &Context, a: ZooGenArgs) -> Result<(), CliError> {
    let (seed, record) = resolve_seed("seed", a.seed, ctx.strict)?;
    let arch: Arch = a.arch.parse().map_err(|e| config(format!("invalid --arch {:?}: {e}", a.arch)))?;
    let out = ctx.path(&a.out);
    let id = a.id.clone().unwrap_or_else(|| {
        out.file_name().and_then(|s| s.to_str()).unwrap_or("zoo").to_string()
    });
    let mut manifest = ZooManifest::new(id, arch, a.count, seed)?;
    if let Some(e) = a.epochs {
        manifest.train.epochs = e;
    }
    if let Some(j) = a.init_jitter {
        manifest.init_jitter = j;
    }
    manifest.validate().map_err(config)?;
    let models = generate_zoo(&manifest)?;
    save_zoo(&out, &manifest, &models)?;

    let mut rc = RunConfig::new("zoo gen", &a, &ctx.home);
    rc.seeds.insert("seed".into(), record);
    rc.outputs.push(out.clone());
    rc.write(&out)?;
    println!("zoo {}: {} models of {} in {}", manifest.zoo_id, models.len(), manifest.arch, out.display());
    Ok(())
}

pub fn attack(ctx: &Context, a: AttackArgs) -> Result<(), CliError> {
    let zoo_dir = ctx.path(&a.zoo);
    let manifest = load_manifest(&zoo_dir)?;
    let levels: Vec<u32> = match (&a.x, &a.sweep) {
        (Some(x), None) => vec![*x],
        (None, Some(r)) => r.clone().collect(),
        _ => return Err(config("give exactly one of --x or --sweep")),
    };
    let mut rc = RunConfig::new("attack", &a, &ctx.home);
    let payload = match (&a.payload, a.payload_seed) {
        (Some(p), None) => {
            let path = ctx.path(p);
            rc.inputs.push(path.clone());
            Payload::from_bytes(&std::fs::read(&path).map_err(|e| CliError::io(&path, e))?)
        }
        (None, Some(s)) => {
            rc.seeds.insert("payload_seed".into(), SeedRecord { value: s, source: "flag" });
            Payload::random(a.payload_bytes, s)
        }
        _ => return Err(config("give exactly one of --payload or --payload-seed")),
    };
    if payload.is_empty() {
        return Err(config("payload is empty"));
    }
    let benign = load_models(&benign_dir(&zoo_dir))?;
    rc.inputs.push(zoo_dir.clone());
    for &x in &levels {
        let attacked = attack_zoo(&benign, x, &payload)?;
        save_attacked(&zoo_dir, &manifest, x, &payload, &attacked)?;
        rc.outputs.push(attacked_dir(&zoo_dir, x));
    }
    rc.write(&zoo_dir.join("attacked"))?;
    println!(
        "attacked {} models at X = {} with payload {} ({} bits)",
        benign.len(),
        levels.iter().map(u32::to_string).collect::<Vec<_>>().join(","),
        &payload.digest()[..16],
        payload.len()
    );
    Ok(())
}

pub fn extract(ctx: &Context, a: ExtractArgs) -> Result<(), CliError> {
    let model = ModelRecord::load(ctx.path(&a.model))?;
    let n_bits = a.bits.unwrap_or_else(|| capacity(model.n_weights(), a.x));
    let payload = extract_bits(&model, a.x, n_bits)?;
    match &a.out {
        Some(p) => {
            let path = ctx.path(p);
            std::fs::write(&path, payload.to_bytes()).map_err(|e| CliError::io(&path, e))?;
            println!("wrote {} bits to {}", payload.len(), path.display());
        }
        None => {
            let hex: String = payload.to_bytes().iter().map(|b| format!("{b:02x}")).collect();
            println!("{hex}");
        }
    }
    Ok(())
}

pub fn features(ctx: &Context, a: FeaturesArgs) -> Result<(), CliError> {
    let kind: FeatureKind = a.kind.parse().map_err(config)?;
    let target: GradTarget = a.grad_target.parse().map_err(config)?;
    let zoo_dir = ctx.path(&a.zoo);
    load_manifest(&zoo_dir)?;
    let out = a.out.as_ref().map(|p| ctx.path(p)).unwrap_or_else(|| zoo_dir.join("features").join(kind.to_string()));
    let levels = attacked_levels(&zoo_dir)?;
    if levels.is_empty() {
        return Err(config(format!("{} has no attacked models; run `attack` first", zoo_dir.display())));
    }
    let benign = load_models(&benign_dir(&zoo_dir))?;
    let mut rc = RunConfig::new("features", &a, &ctx.home);
    rc.inputs.push(zoo_dir.clone());

    let ae: Option<AutoencoderModel> = if kind == FeatureKind::Loss {
        let (seed, record) = resolve_seed("seed", a.seed, ctx.strict)?;
        rc.seeds.insert("seed".into(), record);
        let ids: Vec<String> = benign.iter().map(|m| m.id().unwrap_or_default().to_string()).collect();
        let (train_ids, _) = benign_partition(&ids, seed, AE_TRAIN_FRACTION);
        let train: Vec<ModelRecord> =
            benign.iter().filter(|m| train_ids.iter().any(|t| Some(t.as_str()) == m.id())).cloned().collect();
        let mut cfg = AeConfig::with_seed(seed);
        if let Some(e) = a.ae_epochs {
            cfg.epochs = e;
        }
        let ae = train_autoencoder(&train, &cfg)?;
        std::fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
        ae.save(out.join(AE_FILE))?;
        rc.outputs.push(out.join(AE_FILE));
        Some(ae)
    } else {
        None
    };
    for &x in &levels {
        let attacked = load_models(&attacked_dir(&zoo_dir, x))?;
        let extractor = match kind {
            FeatureKind::Loss => Extractor::Loss(ae.as_ref().expect("trained above")),
            FeatureKind::Grads => Extractor::Grads(target),
            FeatureKind::Weights => Extractor::Weights,
        };
        let ds = build_dataset(&benign, &attacked, extractor)?;
        let path = out.join(format!("x{x}.csv"));
        ds.write_csv(&path)?;
        rc.outputs.push(path);
    }
    rc.write(&out)?;
    println!("{kind} features for {} severities in {}", levels.len(), out.display());
    Ok(())
}

/// Feature kind and (for loss) autoencoder seed recorded by `features`.
fn feature_source(dir: &Path) -> Result<(FeatureKind, Option<u64>), CliError> {
    let kind = runconfig::read_field(dir, "/params/kind")
        .and_then(|v| v.as_str().map(str::to_string))
        .ok_or_else(|| config(format!("{} has no features run_config.json", dir.display())))?;
    let kind: FeatureKind = kind.parse().map_err(config)?;
    let seed = runconfig::read_field(dir, "/seeds/seed/value").and_then(|v| v.as_u64());
    Ok((kind, seed))
}

fn feature_levels(dir: &Path) -> Result<Vec<u32>, CliError> {
    let mut levels: Vec<u32> = std::fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().to_str()?.to_string();
            name.strip_prefix('x')?.strip_suffix(".csv")?.parse().ok()
        })
        .collect();
    levels.sort_unstable();
    Ok(levels)
}

/// Seeds for a protocol run. Loss features fix the seed to the one their
/// autoencoder was trained with so benign test rows stay unseen.
fn protocol_seeds(
    ctx: &Context,
    kind: FeatureKind,
    feature_seed: Option<u64>,
    flags: &[u64],
) -> Result<Vec<u64>, CliError> {
    if kind == FeatureKind::Loss {
        let s = feature_seed.ok_or_else(|| config("loss features lack a recorded autoencoder seed"))?;
        if let Some(bad) = flags.iter().find(|&&f| f != s) {
            return Err(config(format!(
                "seed {bad} differs from the autoencoder seed {s} of these loss features; \
                 rebuild features with --seed {bad}"
            )));
        }
        return Ok(vec![s]);
    }
    if flags.is_empty() {
        let (s, _) = resolve_seed("seed", None, ctx.strict)?;
        return Ok(vec![s]);
    }
    Ok(flags.to_vec())
}

pub fn detect_train(ctx: &Context, a: DetectTrainArgs) -> Result<(), CliError> {
    let method: Method = a.method.parse().map_err(config)?;
    let dir = ctx.path(&a.features);
    let (kind, feature_seed) = feature_source(&dir)?;
    let seed = protocol_seeds(ctx, kind, feature_seed, &a.seed.into_iter().collect::<Vec<_>>())?[0];
    let ds = FeatureDataset::read_csv(dir.join(format!("x{}.csv", a.x)), kind)?;
    let cfg = ExperimentConfig::with_seed(seed);
    let split = split_dataset(&ds, method.is_supervised(), &cfg)?;
    let detector = train_detector(&ds, &split.train, method, &cfg)?;
    let metrics = evaluate_detector(&detector, &ds, &split.test)?;
    let out = a
        .out
        .as_ref()
        .map(|p| ctx.path(p))
        .unwrap_or_else(|| dir.join("detectors").join(format!("{}-x{}.sdk", method, a.x)));
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    detector.save(&out)?;

    let mut rc = RunConfig::new("detect train", &a, &ctx.home);
    rc.seeds.insert("seed".into(), SeedRecord { value: seed, source: if a.seed.is_some() { "flag" } else { "default" } });
    rc.inputs.push(dir.clone());
    rc.outputs.push(out.clone());
    rc.write(out.parent().unwrap_or(Path::new(".")))?;
    println!(
        "{method} on {kind} X={}: train {} test {}  A={:.3} R={:.3} P={:.3} F1={:.3}  -> {}",
        a.x,
        split.train.len(),
        split.test.len(),
        metrics.accuracy,
        metrics.recall,
        metrics.precision,
        metrics.f1,
        out.display()
    );
    Ok(())
}

pub fn detect_eval(ctx: &Context, a: DetectEvalArgs) -> Result<(), CliError> {
    let method: Method = a.method.parse().map_err(config)?;
    let dir = ctx.path(&a.features);
    let (kind, feature_seed) = feature_source(&dir)?;
    let seeds = protocol_seeds(ctx, kind, feature_seed, &a.seed)?;
    let levels: Vec<u32> = match &a.levels {
        Some(r) => r.clone().collect(),
        None => (1..=23).collect(),
    };
    let available = feature_levels(&dir)?;
    if let Some(missing) = levels.iter().find(|x| !available.contains(x)) {
        return Err(config(format!("no feature dataset for X = {missing} in {}", dir.display())));
    }
    let datasets: BTreeMap<u32, FeatureDataset> = levels
        .iter()
        .map(|&x| Ok((x, FeatureDataset::read_csv(dir.join(format!("x{x}.csv")), kind)?)))
        .collect::<Result<_, CliError>>()?;

    let mut report = EvalReport::default();
    for &seed in &seeds {
        report.rows.extend(run_experiment(&datasets, &levels, method, &ExperimentConfig::with_seed(seed))?.rows);
    }
    let out = a.out.as_ref().map(|p| ctx.path(p)).unwrap_or_else(|| dir.join("eval").join(method.to_string()));
    let csv = out.join("report.csv");
    let svg = out.join("f1.svg");
    report.write_csv(&csv)?;
    let svg_text = f1_svg(&report, &format!("F1 vs X: {kind} / {method}"));
    std::fs::write(&svg, svg_text).map_err(|e| CliError::io(&svg, e))?;

    let mut rc = RunConfig::new("detect eval", &a, &ctx.home);
    let source = match (kind, a.seed.is_empty()) {
        (_, false) => "flag",
        (FeatureKind::Loss, true) => "features",
        (_, true) => "default",
    };
    for (i, s) in seeds.iter().enumerate() {
        let key = if i == 0 { "seed".to_string() } else { format!("seed.{i}") };
        rc.seeds.insert(key, SeedRecord { value: *s, source });
    }
    rc.inputs.push(dir.clone());
    rc.outputs.extend([csv.clone(), svg.clone()]);
    rc.write(&out)?;
    print!("{}", report.to_table());
    println!("-> {}", csv.display());
    Ok(())
}

pub fn report(ctx: &Context, a: ReportArgs) -> Result<(), CliError> {
    let mut joined = EvalReport::default();
    for p in &a.reports {
        let r = EvalReport::read_csv(ctx.path(p))?;
        if !a.compare {
            println!("# {}", p.display());
            print!("{}", r.to_table());
        }
        joined.rows.extend(r.rows);
    }
    if a.compare {
        print!("{}", compare_table(&joined));
    }
    if let Some(out) = &a.out {
        joined.write_csv(ctx.path(out))?;
    }
    Ok(())
}

/// Mean F1 per severity, one column per `feature/method`.
pub fn compare_table(report: &EvalReport) -> String {
    let means = report.mean_f1();
    let mut columns: Vec<(FeatureKind, String)> = means.keys().map(|(f, m, _)| (*f, m.clone())).collect();
    columns.dedup();
    let mut levels: Vec<u32> = means.keys().map(|k| k.2).collect();
    levels.sort_unstable();
    levels.dedup();
    let labels: Vec<String> = columns.iter().map(|(f, m)| format!("{f}/{m}")).collect();
    let width = labels.iter().map(String::len).max().unwrap_or(0).max(6);
    let mut s = format!("{:>3}", "X");
    for l in &labels {
        let _ = write!(s, " {l:>width$}");
    }
    s.push('\n');
    for x in levels {
        let _ = write!(s, "{x:>3}");
        for (f, m) in &columns {
            match means.get(&(*f, m.clone(), x)) {
                Some(v) => {
                    let _ = write!(s, " {v:>width$.3}");
                }
                None => {
                    let _ = write!(s, " {:>width$}", "-");
                }
            }
        }
        s.push('\n');
    }
    s
}

pub fn inspect(ctx: &Context, a: InspectArgs) -> Result<(), CliError> {
    let model = ModelRecord::load(ctx.path(&a.model))?;
    let other = a.against.as_ref().map(|p| ModelRecord::load(ctx.path(p))).transpose()?;
    if let Some(o) = &other {
        if o.arch() != model.arch() {
            return Err(config("--against model has a different architecture"));
        }
    }
    println!("arch {}  weights {}", model.arch(), model.n_weights());
    for (k, v) in &model.meta {
        println!("  {k} = {v}");
    }
    let mut shown = 0;
    for (ti, t) in model.tensors().iter().enumerate() {
        if a.tensor.as_ref().is_some_and(|n| n != &t.name) {
            continue;
        }
        println!("{} {:?}", t.name, t.shape);
        for (i, &v) in t.data.iter().enumerate() {
            if shown >= a.limit {
                return Ok(());
            }
            let w = Float32Word::from_f32(v);
            let mut line = format!("  [{i:>4}] {} {:>14e}", word_bits(w, a.x), v);
            if let Some(o) = &other {
                let ow = Float32Word::from_f32(o.tensors()[ti].data[i]);
                let diff = w.raw() ^ ow.raw();
                if diff != 0 {
                    let _ = write!(line, "  changed bits {}", Float32Word(diff).raw().count_ones());
                    let _ = write!(line, "  was {:>14e}", ow.to_f32());
                }
            }
            println!("{line}");
            shown += 1;
        }
    }
    Ok(())
}

/// `s eeeeeeee mmm…` with an optional `|` before the X least significant bits.
fn word_bits(w: Float32Word, x: Option<u32>) -> String {
    let raw = format!("{:032b}", w.raw());
    let (sign, rest) = raw.split_at(1);
    let (exp, mant) = rest.split_at(8);
    match x {
        Some(x) => {
            let (hi, lo) = mant.split_at(23 - x as usize);
            format!("{sign} {exp} {hi}|{lo}")
        }
        None => format!("{sign} {exp} {mant}"),
    }
}
