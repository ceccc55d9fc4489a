use std::fmt;
use std::path::{Path, PathBuf};

use minmax_cert::certify::{
    certified_accuracy_curve, certified_radius, certify as certify_model, prune_redundant, verify_slater, CertStatus,
    CertificationResult, CertifyOptions, RadiusOptions, SlaterStatus,
};
use minmax_cert::classify::{run_classification, synthetic_split, ClassifyConfig};
use minmax_cert::control::{run_demo, DemoConfig};
use minmax_cert::convert::{relu_to_minmax, ReluNet1H};
use minmax_cert::datasets::LabeledSet;
use minmax_cert::train::{init_model, pgd_attack, train as train_model, Dataset, Loss, TrainConfig};
use minmax_cert::{json, AttackSet, MinMaxModel, Norm};
use serde::Serialize;

use crate::*;

/// Diagnostic printed before exiting with code 3.
#[derive(Debug)]
pub struct CliError(String);

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError(format!("{}: {e}", path.display()))
    }

    fn usage(msg: impl Into<String>) -> Self {
        CliError(msg.into())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<minmax_cert::Error> for CliError {
    fn from(e: minmax_cert::Error) -> Self {
        CliError(e.to_string())
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Prefixes loader errors with the flag and path they came from.
fn load<T>(flag: &str, path: &Path, f: impl FnOnce(&Path) -> minmax_cert::Result<T>) -> Result<T> {
    f(path).map_err(|e| CliError(format!("--{flag} {}: {e}", path.display())))
}

fn load_model(path: &Path) -> Result<MinMaxModel> {
    load("model", path, |p| MinMaxModel::load(p))
}

fn load_set(path: &Path, model: &MinMaxModel) -> Result<AttackSet> {
    let set = load("attack-set", path, |p| AttackSet::load(p))?;
    if set.dim() != model.dim() {
        return Err(CliError::usage(format!(
            "--attack-set {}: dimension {} does not match model dimension {}",
            path.display(),
            set.dim(),
            model.dim()
        )));
    }
    Ok(set)
}

fn load_data(path: &Path) -> Result<Dataset> {
    load("data", path, |p| Dataset::load(p))
}

fn check_dim(flag: &str, v: &[f64], model: &MinMaxModel) -> Result<()> {
    if v.len() != model.dim() {
        return Err(CliError::usage(format!(
            "--{flag}: {} coordinates given, model dimension is {}",
            v.len(),
            model.dim()
        )));
    }
    Ok(())
}

fn certify_opts(t: &TolArgs) -> Result<CertifyOptions> {
    if !(t.tol > 0.0 && t.tol.is_finite()) {
        return Err(CliError::usage("--tol must be positive"));
    }
    if !(t.slater_eps > 0.0 && t.slater_eps.is_finite()) {
        return Err(CliError::usage("--slater-eps must be positive"));
    }
    Ok(CertifyOptions {
        duality_tol: t.tol,
        slater_eps: t.slater_eps,
        ..CertifyOptions::default()
    })
}

fn tol_options(t: &TolArgs) -> Vec<(&'static str, String)> {
    vec![("tol", t.tol.to_string()), ("slater_eps", t.slater_eps.to_string())]
}

fn outcome(status: CertStatus) -> Outcome {
    match status {
        CertStatus::CertifiedRobust => Outcome::Success,
        CertStatus::Falsified => Outcome::Falsified,
        CertStatus::Indeterminate => Outcome::Indeterminate,
    }
}

fn output(json: String, out: Option<PathBuf>) -> Output {
    Output {
        json,
        outcome: Outcome::Success,
        files: Vec::new(),
        inputs: Vec::new(),
        options: Vec::new(),
        seed: None,
        out,
        manifest_path: None,
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn read_points(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError(format!("--points {}: {e}", path.display())))?;
    let mut points = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| CliError(format!("--points {}: {e}", path.display())))?;
        let row = rec
            .iter()
            .enumerate()
            .map(|(col, s)| {
                s.parse::<f64>().map_err(|_| {
                    CliError(format!(
                        "--points {}: line {}, column {}: `{s}` is not a number",
                        path.display(),
                        line + 1,
                        col + 1
                    ))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        points.push(row);
    }
    Ok(points)
}

pub fn eval(a: EvalArgs) -> Result<Output> {
    let model = load_model(&a.model)?;
    let mut points: Vec<Vec<f64>> = a.point.iter().map(|c| c.0.clone()).collect();
    if let Some(p) = &a.points {
        points.extend(read_points(p)?);
    }
    if points.is_empty() {
        return Err(CliError::usage("eval needs --point or --points"));
    }
    #[derive(Serialize)]
    struct Row {
        x: Vec<f64>,
        value: f64,
        component: usize,
        piece: usize,
    }
    #[derive(Serialize)]
    struct Out {
        values: Vec<Row>,
    }
    let mut values = Vec::with_capacity(points.len());
    for x in points {
        check_dim("point", &x, &model)?;
        let t = model.trace(&x)?;
        values.push(Row {
            x,
            value: t.value,
            component: t.argmin_i,
            piece: t.argmax_j,
        });
    }
    let mut o = output(json::to_string(&Out { values }), a.out);
    o.inputs.push(("model", a.model));
    if let Some(p) = a.points {
        o.inputs.push(("points", p));
    }
    Ok(o)
}

pub fn certify(a: CertifyArgs) -> Result<Output> {
    let model = load_model(&a.model)?;
    let set = load_set(&a.attack_set, &model)?;
    let opts = certify_opts(&a.tol)?;
    let r = certify_model(&model, &set, &opts)?;
    report_reason(&r);
    let mut o = output(r.to_json(), a.out);
    o.outcome = outcome(r.status);
    o.inputs = vec![("model", a.model), ("attack_set", a.attack_set)];
    o.options = tol_options(&a.tol);
    Ok(o)
}

fn report_reason(r: &CertificationResult) {
    if let Some(reason) = &r.diagnostics.reason {
        eprintln!("indeterminate: {reason}");
    }
}

pub fn attack(a: AttackArgs) -> Result<Output> {
    let model = load_model(&a.model)?;
    #[derive(Serialize)]
    struct Out<'a> {
        method: &'static str,
        attack: &'a [f64],
        value: f64,
        #[serde(skip_serializing_if = "Option::is_none")]
        p_star: Option<f64>,
        #[serde(skip_serializing_if = "Option::is_none")]
        status: Option<CertStatus>,
    }
    match a.method {
        AttackMethod::Exact => {
            let path = a
                .attack_set
                .clone()
                .ok_or_else(|| CliError::usage("--method exact needs --attack-set"))?;
            let set = load_set(&path, &model)?;
            let opts = certify_opts(&a.tol)?;
            let r = certify_model(&model, &set, &opts)?;
            report_reason(&r);
            let value = if r.attack.is_empty() { f64::NAN } else { model.evaluate(&r.attack)? };
            let text = json::to_string(&Out {
                method: "exact",
                attack: &r.attack,
                value,
                p_star: Some(r.p_star),
                status: Some(r.status),
            });
            let mut o = output(text, a.out);
            o.outcome = outcome(r.status);
            o.inputs = vec![("model", a.model), ("attack_set", path)];
            o.options = tol_options(&a.tol);
            o.options.push(("method", "exact".into()));
            Ok(o)
        }
        AttackMethod::Pgd => {
            let center = a.center.clone().map(|c| c.0).ok_or_else(|| CliError::usage("--method pgd needs --center"))?;
            check_dim("center", &center, &model)?;
            let eps = a.eps.ok_or_else(|| CliError::usage("--method pgd needs --eps"))?;
            if !(eps >= 0.0 && eps.is_finite()) {
                return Err(CliError::usage("--eps must be nonnegative"));
            }
            let step = a.step_size.unwrap_or(eps / 4.0);
            let x = pgd_attack(&model, &center, eps, a.steps, step);
            let value = model.evaluate(&x)?;
            let text = json::to_string(&Out {
                method: "pgd",
                attack: &x,
                value,
                p_star: None,
                status: None,
            });
            let mut o = output(text, a.out);
            // A local search can only falsify; failing to find an attack proves nothing.
            o.outcome = if value < 0.0 { Outcome::Falsified } else { Outcome::Success };
            o.inputs = vec![("model", a.model)];
            o.options = vec![
                ("method", "pgd".into()),
                ("center", format!("{center:?}")),
                ("eps", eps.to_string()),
                ("steps", a.steps.to_string()),
                ("step_size", step.to_string()),
            ];
            Ok(o)
        }
    }
}

pub fn radius(a: RadiusArgs) -> Result<Output> {
    use rayon::prelude::*;
    let model = load_model(&a.model)?;
    let mut centers = Vec::new();
    if let Some(c) = &a.center {
        centers.push(c.0.clone());
    }
    if let Some(p) = &a.points {
        let data = load("points", p, |p| Dataset::load(p))?;
        centers.extend(
            data.inputs
                .iter()
                .zip(&data.targets)
                .filter(|(_, &t)| t > 0.0)
                .map(|(x, _)| x.clone()),
        );
    }
    if a.center.is_none() && a.points.is_none() {
        return Err(CliError::usage("radius needs --center or --points"));
    }
    for c in &centers {
        check_dim("center", c, &model)?;
    }
    if !(a.epsilon_max > 0.0 && a.epsilon_max.is_finite()) {
        return Err(CliError::usage("--epsilon-max must be positive"));
    }
    if !(a.radius_tol > 0.0 && a.radius_tol.is_finite()) {
        return Err(CliError::usage("--radius-tol must be positive"));
    }
    let opts = RadiusOptions {
        eps_max: a.epsilon_max,
        tol: a.radius_tol,
        certify: certify_opts(&a.tol)?,
    };
    let norm: Norm = a.norm.into();
    let found: Vec<minmax_cert::Result<f64>> =
        centers.par_iter().map(|c| certified_radius(&model, c, norm, &opts)).collect();

    #[derive(Serialize)]
    struct Row<'a> {
        center: &'a [f64],
        radius: Option<f64>,
    }
    #[derive(Serialize)]
    struct Out<'a> {
        norm: &'static str,
        radii: Vec<Row<'a>>,
    }
    let mut indeterminate = false;
    let mut radii = Vec::with_capacity(centers.len());
    for (c, r) in centers.iter().zip(found) {
        let radius = match r {
            Ok(v) => Some(v),
            Err(minmax_cert::Error::Indeterminate(msg)) => {
                eprintln!("indeterminate radius: {msg}");
                indeterminate = true;
                None
            }
            Err(e) => return Err(e.into()),
        };
        radii.push(Row { center: c, radius });
    }
    let text = json::to_string(&Out {
        norm: norm.as_str(),
        radii,
    });
    let mut o = output(text, a.out);
    if indeterminate {
        o.outcome = Outcome::Indeterminate;
    }
    o.inputs.push(("model", a.model));
    if let Some(p) = a.points {
        o.inputs.push(("points", p));
    }
    o.options = tol_options(&a.tol);
    o.options.extend([
        ("norm", norm.as_str().to_string()),
        ("epsilon_max", a.epsilon_max.to_string()),
        ("radius_tol", a.radius_tol.to_string()),
    ]);
    if let Some(c) = a.center {
        o.options.push(("center", format!("{:?}", c.0)));
    }
    Ok(o)
}

pub fn accuracy(a: AccuracyArgs) -> Result<Output> {
    let model = load_model(&a.model)?;
    let data = load_data(&a.data)?;
    let points: Vec<(Vec<f64>, bool)> = data
        .inputs
        .iter()
        .zip(&data.targets)
        .map(|(x, &t)| (x.clone(), t > 0.0))
        .collect();
    for (x, _) in &points {
        check_dim("data", x, &model)?;
    }
    let norm: Norm = a.norm.into();
    let opts = certify_opts(&a.tol)?;
    let accs = certified_accuracy_curve(&model, &points, &a.eps.0, norm, &true, &opts)?;

    #[derive(Serialize)]
    struct Point {
        eps: f64,
        certified_accuracy: f64,
    }
    #[derive(Serialize)]
    struct Out {
        norm: &'static str,
        sensitive_points: usize,
        curve: Vec<Point>,
    }
    let curve: Vec<Point> = a
        .eps.0
        .iter()
        .zip(&accs)
        .map(|(&eps, &certified_accuracy)| Point { eps, certified_accuracy })
        .collect();
    let mut o = output(String::new(), a.out);
    if let Some(path) = &a.csv {
        let mut text = String::from("eps,certified_accuracy\n");
        for p in &curve {
            text.push_str(&format!("{:.16e},{:.16e}\n", p.eps, p.certified_accuracy));
        }
        o.files.push((path.clone(), text));
    }
    o.json = json::to_string(&Out {
        norm: norm.as_str(),
        sensitive_points: points.iter().filter(|(_, s)| *s).count(),
        curve,
    });
    o.inputs = vec![("model", a.model), ("data", a.data)];
    o.options = tol_options(&a.tol);
    o.options.extend([("norm", norm.as_str().to_string()), ("eps", format!("{:?}", a.eps.0))]);
    Ok(o)
}

pub fn prune(a: PruneArgs) -> Result<Output> {
    let model = load_model(&a.model)?;
    let (pruned, report) = prune_redundant(&model, &CertifyOptions::default().solve)?;
    eprintln!(
        "removed {} of {} pieces ({} undecided, kept)",
        report.removed.len(),
        model.num_components() * model.num_pieces(),
        report.undecided.len()
    );
    let mut o = output(pruned.to_json(), a.out);
    o.inputs.push(("model", a.model));
    Ok(o)
}

pub fn slater(a: SlaterArgs) -> Result<Output> {
    let model = load_model(&a.model)?;
    let set = load_set(&a.attack_set, &model)?;
    if !(a.slater_eps > 0.0 && a.slater_eps.is_finite()) {
        return Err(CliError::usage("--slater-eps must be positive"));
    }
    let status = verify_slater(&model, &set, a.slater_eps, &CertifyOptions::default().solve)?;
    #[derive(Serialize)]
    struct Out {
        slater: SlaterStatus,
    }
    let mut o = output(json::to_string(&Out { slater: status }), a.out);
    o.outcome = if status == SlaterStatus::Ok { Outcome::Success } else { Outcome::Indeterminate };
    o.inputs = vec![("model", a.model), ("attack_set", a.attack_set)];
    o.options.push(("slater_eps", a.slater_eps.to_string()));
    Ok(o)
}

pub fn convert(a: ConvertArgs) -> Result<Output> {
    let net = load("net", &a.net, |p| ReluNet1H::load(p))?;
    let model = relu_to_minmax(&net, a.cap)?;
    let mut o = output(model.to_json(), a.out);
    o.inputs.push(("net", a.net));
    o.options.push(("cap", a.cap.to_string()));
    Ok(o)
}

pub fn train(a: TrainArgs) -> Result<Output> {
    let data = load_data(&a.data)?;
    let d = data
        .dim()
        .ok_or_else(|| CliError(format!("--data {}: no samples", a.data.display())))?;
    let mut cfg = match &a.config {
        Some(p) => load("config", p, |p| json::read_file::<TrainConfig>(p))?,
        None => TrainConfig::new(100, 0.01, 32, 0, Loss::Mse),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.learning_rate = lr;
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    if let Some(l) = a.loss {
        cfg.loss = match l {
            LossArg::Mse => Loss::Mse,
            LossArg::Logistic => Loss::Logistic,
        };
    }
    cfg.validate()?;
    let init = match &a.model {
        Some(p) => {
            let m = load_model(p)?;
            if m.dim() != d {
                return Err(CliError::usage(format!(
                    "--model {}: dimension {} does not match data dimension {d}",
                    p.display(),
                    m.dim()
                )));
            }
            m
        }
        None => init_model(d, a.m, a.n, &data, cfg.seed)?,
    };
    let report = train_model(&init, &data, &cfg)?;
    let mut o = output(report.model.to_json(), a.out);
    if let Some(log) = &a.log {
        let mut text = String::from("epoch,loss\n");
        for (k, l) in report.epoch_losses.iter().enumerate() {
            text.push_str(&format!("{k},{l:.16e}\n"));
        }
        o.files.push((log.clone(), text));
    }
    o.seed = Some(cfg.seed);
    o.inputs.push(("data", a.data));
    if let Some(p) = a.config {
        o.inputs.push(("config", p));
    }
    if let Some(p) = a.model {
        o.inputs.push(("model", p));
    }
    o.options = vec![
        ("m", init.num_components().to_string()),
        ("n", init.num_pieces().to_string()),
        ("train_config", json::to_string(&cfg)),
    ];
    Ok(o)
}

pub fn demo_control(a: DemoControlArgs) -> Result<Output> {
    if a.grid == 0 {
        return Err(CliError::usage("--grid must be positive"));
    }
    let mut cfg = DemoConfig {
        seed: a.seed,
        grid_y: a.grid,
        grid_ydot: a.grid,
        ..DemoConfig::default()
    };
    cfg.train.seed = a.seed;
    cfg.train.batch_size = a.batch_size;
    cfg.train.validate()?;
    let opts = certify_opts(&a.tol)?;
    ensure_dir(&a.out_dir)?;
    let report = run_demo(&cfg, &opts)?;
    report_reason(&report.certificate);

    let mut o = output(report.to_json(), Some(a.out_dir.join("report.json")));
    o.files = vec![
        (a.out_dir.join("policy.json"), report.policy.to_json()),
        (a.out_dir.join("sweep.csv"), report.sweep_csv()),
    ];
    o.manifest_path = Some(a.out_dir.join("manifest.json"));
    o.outcome = match report.certificate.status {
        CertStatus::Indeterminate => Outcome::Indeterminate,
        _ if report.certified_braking() => Outcome::Success,
        _ => Outcome::Falsified,
    };
    o.seed = Some(a.seed);
    o.options = tol_options(&a.tol);
    o.options.extend([
        ("batch_size", a.batch_size.to_string()),
        ("grid", a.grid.to_string()),
    ]);
    Ok(o)
}

const MNIST_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

pub fn demo_mnist(a: DemoMnistArgs) -> Result<Output> {
    if a.downsample == 0 {
        return Err(CliError::usage("--downsample must be positive"));
    }
    if a.eps.0.windows(2).any(|w| w[1] < w[0]) {
        return Err(CliError::usage("--eps must be ascending"));
    }
    let mut cfg = ClassifyConfig {
        seed: a.seed,
        downsample: a.downsample,
        eval_points: a.eval_points,
        eps_grid: a.eps.0.clone(),
        ..ClassifyConfig::default()
    };
    cfg.train.seed = a.seed;
    cfg.train.epochs = a.epochs;
    if let Some(adv) = cfg.train.adversarial.as_mut() {
        adv.end_radius = a.train_eps;
        adv.ramp_epochs = adv.ramp_epochs.min(a.epochs);
    }
    cfg.train.validate()?;
    let opts = certify_opts(&a.tol)?;

    let mut inputs = Vec::new();
    let (train_set, test_set) = match &a.data {
        Some(dir) => {
            let paths: Vec<PathBuf> = MNIST_FILES.iter().map(|f| dir.join(f)).collect();
            let train = load("data", &paths[0], |p| LabeledSet::load_idx(p, &paths[1]))?;
            let test = load("data", &paths[2], |p| LabeledSet::load_idx(p, &paths[3]))?;
            inputs.push(("data", dir.clone()));
            (train.take_per_class(a.train_per_class, &[cfg.sensitive, cfg.other]), test)
        }
        None => synthetic_split(a.seed, a.train_per_class, (a.eval_points * 3).max(60), cfg.sensitive, cfg.other)?,
    };
    ensure_dir(&a.out_dir)?;
    let report = run_classification(&train_set, &test_set, &cfg, &opts)?;
    eprintln!(
        "single certification at eps {}: {:.3} s ({:?})",
        a.eps.0.last().copied().unwrap_or(0.0),
        report.certify_seconds,
        report.certify_status
    );

    let mut o = output(report.to_json(), Some(a.out_dir.join("report.json")));
    o.files = vec![
        (a.out_dir.join("model.json"), report.model.to_json()),
        (a.out_dir.join("accuracy.csv"), report.curve_csv()),
    ];
    o.manifest_path = Some(a.out_dir.join("manifest.json"));
    o.seed = Some(a.seed);
    o.inputs = inputs;
    o.options = tol_options(&a.tol);
    o.options.extend([
        ("downsample", a.downsample.to_string()),
        ("train_per_class", a.train_per_class.to_string()),
        ("eval_points", a.eval_points.to_string()),
        ("epochs", a.epochs.to_string()),
        ("train_eps", a.train_eps.to_string()),
        ("eps", format!("{:?}", a.eps.0)),
        ("synthetic", a.data.is_none().to_string()),
    ]);
    Ok(o)
}
