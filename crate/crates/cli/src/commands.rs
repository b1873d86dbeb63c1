use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_chacha::ChaCha8Rng;

use bipoint::data::{self, Dataset, Primitive};
use bipoint::model::argmax_rows;
use bipoint::nn::Tensor;
use bipoint::train::{self, sign_flip_rate};
use bipoint::{
    bitops, Checkpoint, EmSign, GradVariant, InferencePath, Model, ModelSpec, TrainConfig,
};

use crate::{
    BenchArgs, Command, EmSignArg, EvalArgs, GenDataArgs, InspectArgs, PathArg, RobustnessArgs, SplitArg,
    TrainArgs, VariantArg, EXIT_IO, EXIT_NUMERIC, EXIT_USAGE,
};

/// Invalid flag values detected before any work starts.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Predictions of the packed and simulated paths differ.
#[derive(Debug)]
struct PathMismatch(String);

impl std::fmt::Display for PathMismatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for PathMismatch {}

fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(UsageError(msg.into()).into())
}

pub(crate) fn exit_code(e: &anyhow::Error) -> i32 {
    for cause in e.chain() {
        if cause.is::<UsageError>() {
            return EXIT_USAGE;
        }
        if cause.is::<PathMismatch>() {
            return EXIT_NUMERIC;
        }
        if let Some(err) = cause.downcast_ref::<bipoint::Error>() {
            return match err {
                bipoint::Error::Config(_) => EXIT_USAGE,
                bipoint::Error::NonFiniteLoss { .. } => EXIT_NUMERIC,
                _ => EXIT_IO,
            };
        }
    }
    EXIT_IO
}

pub(crate) fn dispatch(cmd: &Command, out: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::GenData(a) => cmd_gen_data(a, out),
        Command::Train(a) => cmd_train(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Bench(a) => cmd_bench(a, out),
        Command::Inspect(a) => cmd_inspect(a, out),
        Command::Robustness(a) => cmd_robustness(a, out),
    }
}

fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>> {
    let items: Result<Vec<T>> = text
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|_| UsageError(format!("invalid {what} {s:?}")).into()))
        .collect();
    let items = items?;
    if items.is_empty() {
        return usage(format!("empty {what} list"));
    }
    Ok(items)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Writes to `path` when given, otherwise to `out`.
fn emit(path: Option<&Path>, text: &str, out: &mut dyn Write) -> Result<()> {
    match path {
        Some(p) => write_text(p, text),
        None => out.write_all(text.as_bytes()).context("writing output"),
    }
}

const TRAIN_FILE: &str = "train.pcd";
const TEST_FILE: &str = "test.pcd";

fn cmd_gen_data(a: &GenDataArgs, out: &mut dyn Write) -> Result<()> {
    if a.points == 0 {
        return usage("--points must be positive");
    }
    let (train, test) = match &a.off_dir {
        Some(dir) => {
            let ds = data::load_off_dir(dir, a.points, a.seed)?;
            (ds.train, ds.test)
        }
        None => {
            let classes: Vec<Primitive> = a
                .classes
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| s.parse::<Primitive>().map_err(|e| UsageError(e.to_string())))
                .collect::<std::result::Result<_, _>>()?;
            if classes.is_empty() {
                return usage("no classes given");
            }
            if a.per_class == 0 {
                return usage("--per-class must be positive");
            }
            data::generate_primitives(&classes, a.per_class, a.points, a.seed)?.split(0.8, a.seed)
        }
    };
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    data::write_dataset_file(&train, &a.out.join(TRAIN_FILE))?;
    data::write_dataset_file(&test, &a.out.join(TEST_FILE))?;
    writeln!(
        out,
        "wrote {} train and {} test clouds ({} classes, {} points) to {}",
        train.len(),
        test.len(),
        train.num_classes,
        train.points,
        a.out.display()
    )?;
    Ok(())
}

fn load_split(path: &Path, split: SplitArg) -> Result<Dataset> {
    let file = if path.is_dir() {
        path.join(match split {
            SplitArg::Train => TRAIN_FILE,
            SplitArg::Test => TEST_FILE,
        })
    } else {
        path.to_owned()
    };
    Ok(data::read_dataset_file(&file)?)
}

fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let config = TrainConfig {
        lambda: a.lambda,
        tau: a.tau,
        base_lr: a.lr,
        lr_floor: a.lr_floor,
        epochs: a.epochs,
        batch_size: a.batch,
        seed: a.seed,
        grad_variant: match a.grad_variant {
            VariantArg::Analytic => GradVariant::Analytic,
            VariantArg::Published => GradVariant::Published,
        },
        em_sign: match a.em_sign {
            EmSignArg::Attract => EmSign::Attract,
            EmSignArg::Literal => EmSign::Literal,
        },
        deterministic: a.deterministic,
        jitter_sigma: a.jitter,
        ..TrainConfig::default()
    };
    config.validate()?;
    let report_path = a.report.clone().unwrap_or_else(|| a.out.with_extension("csv"));
    let dump_path = a.dump.clone().unwrap_or_else(|| a.out.with_extension("diag.json"));

    let train_set = load_split(&a.data, SplitArg::Train)?;
    let test_set = match a.data.join(TEST_FILE) {
        p if a.data.is_dir() && p.exists() => Some(data::read_dataset_file(&p)?),
        _ => None,
    };
    let mut spec = ModelSpec::new(train_set.num_classes, train_set.points);
    if a.real {
        spec = spec.real_control();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    rng.set_stream(1);
    let mut model = Model::<f32>::build(&spec, &mut rng)?;
    let report = match train::train(&mut model, &train_set, test_set.as_ref(), &config) {
        Ok(r) => r,
        Err(bipoint::Error::NonFiniteLoss { epoch, step, snapshot }) => {
            let text = serde_json::to_string_pretty(&*snapshot)?;
            write_text(&dump_path, &text)?;
            return Err(anyhow!(bipoint::Error::NonFiniteLoss { epoch, step, snapshot }))
                .with_context(|| format!("training aborted; diagnostics in {}", dump_path.display()));
        }
        Err(e) => return Err(e.into()),
    };
    Checkpoint::new(model, Some(a.seed), Some(config)).save(&a.out)?;
    write_text(&report_path, &report.to_csv())?;
    match report.last() {
        Some(r) => writeln!(
            out,
            "epochs={} train_acc={:.6} test_acc={} mean_bimodality={:.6}",
            report.records.len(),
            r.train_acc,
            r.test_acc.map_or("n/a".into(), |v| format!("{v:.6}")),
            r.mean_bimodality()
        )?,
        None => writeln!(out, "epochs=0")?,
    }
    writeln!(out, "checkpoint={}", a.out.display())?;
    writeln!(out, "report={}", report_path.display())?;
    Ok(())
}

fn predictions(model: &Model<f32>, data: &Dataset, path: InferencePath) -> Result<Vec<usize>> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let (x, _) = data.batch::<f32>(&idx)?;
    Ok(argmax_rows(&model.predict_with(&x, path)?))
}

fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let mut model = Checkpoint::<f32>::load(&a.checkpoint)?.model;
    let data = load_split(&a.data, a.split)?;
    let classes = model.spec().num_classes;
    if data.num_classes > classes {
        bail!(bipoint::Error::Format {
            what: "dataset",
            detail: format!("{} classes, checkpoint has {classes}", data.num_classes),
        });
    }
    model.prepare_packed();
    let preds = match a.path {
        PathArg::Packed => predictions(&model, &data, InferencePath::Packed)?,
        PathArg::Simulated => predictions(&model, &data, InferencePath::Simulated)?,
        PathArg::Both => {
            let p = predictions(&model, &data, InferencePath::Packed)?;
            let s = predictions(&model, &data, InferencePath::Simulated)?;
            if let Some(i) = p.iter().zip(&s).position(|(x, y)| x != y) {
                return Err(PathMismatch(format!(
                    "packed and simulated predictions differ at sample {i} ({} vs {})",
                    p[i], s[i]
                ))
                .into());
            }
            p
        }
    };
    let labels = data.labels();
    let mut correct = vec![0usize; classes];
    let mut total = vec![0usize; classes];
    for (p, l) in preds.iter().zip(&labels) {
        total[*l] += 1;
        correct[*l] += (p == l) as usize;
    }
    let overall = correct.iter().sum::<usize>() as f64 / labels.len().max(1) as f64;
    let path = match a.path {
        PathArg::Packed => "packed",
        PathArg::Simulated => "simulated",
        PathArg::Both => "packed+simulated",
    };
    writeln!(out, "path={path} samples={} overall_accuracy={overall:.6}", labels.len())?;
    writeln!(out, "class,correct,total,accuracy")?;
    for c in 0..classes {
        let acc = if total[c] == 0 { f64::NAN } else { correct[c] as f64 / total[c] as f64 };
        writeln!(out, "{c},{},{},{acc:.6}", correct[c], total[c])?;
    }
    Ok(())
}

fn cmd_bench(a: &BenchArgs, out: &mut dyn Write) -> Result<()> {
    let sizes: Vec<usize> = parse_list(&a.sizes, "size")?;
    if sizes.contains(&0) || a.repeats == 0 {
        return usage("sizes and --repeats must be positive");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut csv = String::from("size,packed_ns,real_ns,speedup\n");
    for &n in &sizes {
        let x = Tensor::<f32>::normal(&[n, n], 0.0, 1.0, &mut rng).map(bipoint::binlayer::sign);
        let w = Tensor::<f32>::normal(&[n, n], 0.0, 1.0, &mut rng).map(bipoint::binlayer::sign);
        let (px, pw) = (bitops::pack(&x), bitops::pack(&w));
        let mut packed_ns = u128::MAX;
        let mut real_ns = u128::MAX;
        let mut packed = None;
        let mut real = None;
        for _ in 0..a.repeats {
            let t = Instant::now();
            packed = Some(bitops::xnor_popcount_matmul(&px, &pw)?);
            packed_ns = packed_ns.min(t.elapsed().as_nanos());
            let t = Instant::now();
            real = Some(x.matmul_nt(&w)?);
            real_ns = real_ns.min(t.elapsed().as_nanos());
        }
        let (packed, real) = (packed.expect("repeats > 0"), real.expect("repeats > 0"));
        if packed.data.iter().zip(real.data()).any(|(&p, &r)| p as f32 != r) {
            return Err(PathMismatch(format!("packed product differs from the real product at size {n}")).into());
        }
        let (packed_ns, real_ns) = (packed_ns.max(1), real_ns.max(1));
        let _ = writeln!(csv, "{n},{packed_ns},{real_ns},{:.3}", real_ns as f64 / packed_ns as f64);
    }
    emit(a.out.as_deref(), &csv, out)
}

fn gmm_path(a: &InspectArgs) -> PathBuf {
    a.gmm_out.clone().unwrap_or_else(|| {
        let stem = a.out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        a.out.with_file_name(format!("{stem}_gmm.csv"))
    })
}

fn cmd_inspect(a: &InspectArgs, out: &mut dyn Write) -> Result<()> {
    let model = Checkpoint::<f32>::load(&a.checkpoint)?.model;
    let layers = model.layers().len();
    let Some(layer) = model.layers().get(a.layer) else {
        return usage(format!("--layer {} out of range for {layers} layers", a.layer));
    };
    let Some(layer) = layer.as_binary() else {
        let binary: Vec<usize> = (0..layers).filter(|&i| model.layers()[i].as_binary().is_some()).collect();
        return usage(format!("layer {} is real-valued; binary layers are {binary:?}", a.layer));
    };
    let n = layer.in_features();
    let mut weights = String::from("channel,index,weight\n");
    for (i, w) in layer.weights().data().iter().enumerate() {
        let _ = writeln!(weights, "{},{},{w}", i / n, i % n);
    }
    let mut gmm = String::from("channel,mu0,mu1,var0,var1,beta0,beta1\n");
    for (j, g) in layer.gmm().iter().enumerate() {
        let _ = writeln!(gmm, "{j},{},{},{},{},{},{}", g.mu[0], g.mu[1], g.var[0], g.var[1], g.beta[0], g.beta[1]);
    }
    let gpath = gmm_path(a);
    write_text(&a.out, &weights)?;
    write_text(&gpath, &gmm)?;
    writeln!(
        out,
        "layer {}: {} weights to {}, {} channels to {}, bimodality {:.6}",
        a.layer,
        layer.weights().len(),
        a.out.display(),
        layer.out_features(),
        gpath.display(),
        train::bimodality_metric(layer)
    )?;
    Ok(())
}

fn cmd_robustness(a: &RobustnessArgs, out: &mut dyn Write) -> Result<()> {
    let stds: Vec<f64> = parse_list(&a.stds, "noise std")?;
    if stds.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
        return usage("noise stds must be finite and >= 0");
    }
    if a.trials == 0 {
        return usage("--trials must be positive");
    }
    let model = Checkpoint::<f32>::load(&a.checkpoint)?.model;
    let data = a.data.as_deref().map(|p| load_split(p, SplitArg::Test)).transpose()?;
    let accuracy: Option<Vec<f64>> = match &data {
        None => None,
        Some(d) => Some(
            stds.iter()
                .map(|&s| noisy_accuracy(&model, d, s, a.seed))
                .collect::<Result<_>>()?,
        ),
    };
    let mut csv = String::from("layer,noise_std,sign_flip_rate");
    if accuracy.is_some() {
        csv.push_str(",accuracy");
    }
    csv.push('\n');
    for (i, layer) in model.layers().iter().enumerate() {
        let Some(layer) = layer.as_binary() else { continue };
        for (k, &s) in stds.iter().enumerate() {
            // Same draws for every std, so rates are monotone along the list.
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
            let rate = sign_flip_rate(layer, s, a.trials, &mut rng);
            let _ = write!(csv, "{i},{s},{rate}");
            if let Some(acc) = &accuracy {
                let _ = write!(csv, ",{}", acc[k]);
            }
            csv.push('\n');
        }
    }
    emit(a.out.as_deref(), &csv, out)
}

fn noisy_accuracy(model: &Model<f32>, data: &Dataset, std: f64, seed: u64) -> Result<f64> {
    let mut noisy = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    for layer in noisy.binary_layers_mut() {
        layer.update_weights(|w| w.iter_mut().for_each(|v| *v += (std * rng.sample::<f64, _>(StandardNormal)) as f32));
    }
    noisy.prepare_packed();
    let preds = predictions(&noisy, data, InferencePath::Packed)?;
    let labels = data.labels();
    Ok(preds.iter().zip(&labels).filter(|(p, l)| p == l).count() as f64 / labels.len().max(1) as f64)
}
