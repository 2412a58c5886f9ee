use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spotlight::attention_eval::{
    budget_from_rate, evaluate, AttentionInstance, EvalReport, OracleRetriever, Retriever,
};
use spotlight::bitcodes::{nxor_scores, pack_bits, top_k_indices};
use spotlight::hashers::{Checkpoint, DownProjEstimator, LinearHasher, MlpHasher};
use spotlight::ranking_loss::RankingLossConfig;
use spotlight::synthkv::{cone_stats, gaussian_values, read_dump, write_dump, ConeSpec, QkDump};
use spotlight::trainer::{train_hasher_with, LossKind, TrainConfig, TrainData, TrainReport, Trainable};

use crate::config::Settings;
use crate::{BenchArgs, CliError, EvalArgs, GenerateArgs, TrainArgs};

type CmdResult = Result<(), CliError>;

/// Copies every flag that was given into `settings` under its field name.
macro_rules! overrides {
    ($settings:expr, $args:expr; $($field:ident),* $(,)?) => {
        $(
            if let Some(v) = &$args.$field {
                $settings.set(stringify!($field), v.display_value())?;
            }
        )*
    };
}

trait DisplayValue {
    fn display_value(&self) -> String;
}

macro_rules! display_via_to_string {
    ($($t:ty),*) => {
        $(impl DisplayValue for $t {
            fn display_value(&self) -> String {
                self.to_string()
            }
        })*
    };
}

display_via_to_string!(u64, usize, f64, bool, String);

impl DisplayValue for PathBuf {
    fn display_value(&self) -> String {
        self.display().to_string()
    }
}

fn settings(command: &'static str, defaults: &[(&str, &str)], file: Option<&PathBuf>) -> Result<Settings, CliError> {
    let mut s = Settings::new(command, defaults);
    if let Some(path) = file {
        s.load_file(path)?;
    }
    Ok(s)
}

fn ensure_parent(path: &Path) -> CmdResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::data(format!("cannot create {}: {e}", dir.display())))?;
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> CmdResult {
    ensure_parent(path)?;
    std::fs::write(path, text).map_err(|e| CliError::data(format!("cannot write {}: {e}", path.display())))
}

fn required_path(s: &Settings, key: &str) -> Result<PathBuf, CliError> {
    match s.raw(key) {
        "" => Err(CliError::usage(format!("missing required setting '{key}'"))),
        p => Ok(PathBuf::from(p)),
    }
}

fn load_dump(path: &Path) -> Result<QkDump, CliError> {
    read_dump(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

const GENERATE_DEFAULTS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("dim", "128"),
    ("n_queries", "2048"),
    ("n_keys", "2048"),
    ("spread", "0.3"),
    ("axis_cos", "0"),
    ("norm_mean", "16"),
    ("norm_std", "4"),
    ("outlier_rate", "0"),
    ("outlier_scale", "8"),
    ("out", "dump.splq"),
];

pub fn generate(a: GenerateArgs) -> CmdResult {
    let mut s = settings("generate", GENERATE_DEFAULTS, a.config.as_ref())?;
    overrides!(s, a; seed, dim, n_queries, n_keys, spread, axis_cos, norm_mean, norm_std,
        outlier_rate, outlier_scale, out);
    let seed = s.seed()?;
    let mut spec = ConeSpec::with_geometry(s.get("dim")?, s.get("spread")?, s.get("axis_cos")?, seed)?;
    spec.norm_mean = s.get("norm_mean")?;
    spec.norm_std = s.get("norm_std")?;
    spec.outlier_rate = s.get("outlier_rate")?;
    spec.outlier_scale = s.get("outlier_scale")?;
    spec.validate()?;

    let out = required_path(&s, "out")?;
    let dump = QkDump::generate(&spec, s.get("n_queries")?, s.get("n_keys")?, seed)?;
    ensure_parent(&out)?;
    write_dump(&out, &dump)?;
    s.write_meta(&out)?;

    let stats = cone_stats(&dump.queries, &dump.keys, 10_000, seed);
    println!("wrote {}", out.display());
    print!("{}", s.provenance("")?);
    println!("n_queries = {}", dump.n_queries());
    println!("n_keys = {}", dump.n_keys());
    println!("dim = {}", dump.dim());
    println!("intra_cos_mean = {:.6}", stats.intra_cos);
    println!("cross_abs_cos_mean = {:.6}", stats.cross_abs_cos);
    Ok(())
}

const TRAIN_DEFAULTS: &[(&str, &str)] = &[
    ("dump", ""),
    ("holdout", ""),
    ("out", "hasher.splh"),
    ("hasher", "mlp"),
    ("hidden", "128"),
    ("bits", "128"),
    ("gamma", "64"),
    ("reduction", "16"),
    ("iters", "8192"),
    ("max_lr", "0.001"),
    ("min_lr", "0"),
    ("warmup", "81"),
    ("weight_decay", "0.1"),
    ("grad_clip", "1"),
    ("batch", "1"),
    ("seq_len", "2048"),
    ("loss", "ranking"),
    ("beta", "1"),
    ("alpha", "3"),
    ("maskout", "0.98"),
    ("max_top", "none"),
    ("max_oth", "512"),
    ("query_subsample", "16"),
    ("seed", "0"),
    ("log_every", "256"),
];

fn fit<M: Trainable<f32> + Retriever>(
    model: M,
    data: &QkDump,
    loss: &RankingLossConfig,
    cfg: &TrainConfig,
    holdout: Option<&AttentionInstance>,
    log_every: usize,
) -> Result<(M, TrainReport), CliError> {
    train_hasher_with(model, TrainData::Dump(data), loss, cfg, holdout, |r| {
        if log_every > 0 && r.iter % log_every == 0 {
            eprintln!(
                "iter {:>6}  loss {:.6}  violation_rate {:.4}  lr {:.3e}",
                r.iter, r.loss, r.violation_rate, r.lr
            );
        }
    })
    .map_err(|e| {
        let mut err = CliError::from(e);
        if err.code == crate::EXIT_NUMERIC {
            err.message = format!("training aborted: {}", err.message);
        }
        err
    })
}

pub fn train(a: TrainArgs) -> CmdResult {
    let mut s = settings("train", TRAIN_DEFAULTS, a.config.as_ref())?;
    overrides!(s, a; dump, holdout, out, hasher, hidden, bits, gamma, reduction, iters, max_lr,
        min_lr, warmup, weight_decay, grad_clip, batch, seq_len, loss, beta, alpha, maskout,
        max_top, max_oth, query_subsample, seed, log_every);
    let seed = s.seed()?;
    let dump = load_dump(&required_path(&s, "dump")?)?;
    let holdout = match s.raw("holdout") {
        "" => None,
        p => Some(AttentionInstance::causal_from_dump(&load_dump(Path::new(p))?, None)?),
    };
    let out = required_path(&s, "out")?;

    let iters: usize = s.get("iters")?;
    let cfg = TrainConfig {
        num_iters: iters,
        max_lr: s.get("max_lr")?,
        min_lr: s.get("min_lr")?,
        warmup_iters: s.get::<usize>("warmup")?.min(iters),
        weight_decay: s.get("weight_decay")?,
        grad_clip: s.get("grad_clip")?,
        batch: s.get("batch")?,
        seq_len: s.get("seq_len")?,
        loss: match s.raw("loss") {
            "ranking" => LossKind::Ranking,
            "recon" | "reconstruction" => LossKind::Reconstruction,
            other => return Err(CliError::usage(format!("unknown loss '{other}' (ranking | recon)"))),
        },
        seed,
        ..TrainConfig::default()
    };
    let loss = RankingLossConfig {
        beta: s.get("beta")?,
        alpha: s.get("alpha")?,
        maskout: s.get("maskout")?,
        max_top: s.get_opt("max_top")?,
        max_oth: s.get_opt("max_oth")?,
        query_subsample: s.get_opt("query_subsample")?,
    };
    let log_every: usize = s.get("log_every")?;
    let (d, bits, gamma) = (dump.dim(), s.get("bits")?, s.get::<f32>("gamma")?);
    let hold = holdout.as_ref();

    let (checkpoint, report) = match s.raw("hasher") {
        "mlp" => {
            let init = MlpHasher::random(d, s.get("hidden")?, bits, gamma, seed)?;
            let (m, r) = fit(init, &dump, &loss, &cfg, hold, log_every)?;
            (Checkpoint::Mlp(m), r)
        }
        "linear" | "lsh" => {
            let init = LinearHasher::qr_init(d, bits, gamma, seed)?;
            let (m, r) = fit(init, &dump, &loss, &cfg, hold, log_every)?;
            (Checkpoint::Linear(m), r)
        }
        "downproj" => {
            let init = DownProjEstimator::random(d, s.get("reduction")?, seed)?;
            let (m, r) = fit(init, &dump, &loss, &cfg, hold, log_every)?;
            (Checkpoint::DownProj(m), r)
        }
        other => {
            return Err(CliError::usage(format!(
                "unknown hasher '{other}' (mlp | linear | downproj)"
            )))
        }
    };

    ensure_parent(&out)?;
    checkpoint.save(&out)?;
    s.write_meta(&out)?;
    let mut report_path = out.as_os_str().to_owned();
    report_path.push(".report.jsonl");
    let header = format!(
        "{{\"config_hash\":\"{}\",\"seed\":{},\"hasher\":\"{}\"}}\n",
        s.hash(),
        seed,
        checkpoint.kind_name()
    );
    write_text(Path::new(&report_path), &(header + &report.to_jsonl()))?;

    println!("wrote {}", out.display());
    print!("{}", s.provenance("")?);
    println!("hasher = {}", checkpoint.kind_name());
    println!("iterations = {}", report.records.len());
    if !report.records.is_empty() {
        let n = report.records.len();
        let w = (n / 10).max(1);
        let (first, last) = (report.mean_loss(0..w), report.mean_loss(n - w..n));
        println!("loss_first_window = {first:.6}");
        println!("loss_last_window = {last:.6}");
        println!("loss_trend = {}", if last < first { "falling" } else { "not falling" });
    }
    if let Some(iou) = report.final_iou {
        println!("holdout_mean_iou = {iou:.6}");
    }
    println!("wall_clock_secs = {:.2}", report.wall_clock_secs);
    Ok(())
}

const EVAL_DEFAULTS: &[(&str, &str)] = &[
    ("dump", ""),
    ("checkpoints", ""),
    ("methods", "oracle,lsh"),
    ("budget_rate", "0.02"),
    ("budget", ""),
    ("values", "true"),
    ("bits", "128"),
    ("seed", "0"),
    ("out", "eval_report.txt"),
    ("csv", ""),
];

fn baseline(name: &str, d: usize, bits: usize, seed: u64) -> Result<Box<dyn Retriever>, CliError> {
    Ok(match name {
        "oracle" => Box::new(OracleRetriever),
        "lsh" => Box::new(LinearHasher::<f32>::qr_init(d, bits, 64.0, seed)?),
        "mlp" => Box::new(MlpHasher::<f32>::random(d, d, bits, 64.0, seed)?),
        "downproj" => Box::new(DownProjEstimator::<f32>::random(d, 16, seed)?),
        other => {
            return Err(CliError::usage(format!(
                "unknown method '{other}' (oracle | lsh | mlp | downproj)"
            )))
        }
    })
}

fn checkpoint_retriever(path: &Path) -> Result<(String, Box<dyn Retriever>), CliError> {
    let ck = Checkpoint::load(path).map_err(|e| {
        let mut err = CliError::from(e);
        err.message = format!("checkpoint {}: {}", path.display(), err.message);
        err
    })?;
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let label = format!("{}:{stem}", ck.kind_name());
    let r: Box<dyn Retriever> = match ck {
        Checkpoint::Linear(h) => Box::new(h),
        Checkpoint::Mlp(h) => Box::new(h),
        Checkpoint::DownProj(h) => Box::new(h),
    };
    Ok((label, r))
}

pub fn eval(a: EvalArgs) -> CmdResult {
    let mut s = settings("eval", EVAL_DEFAULTS, a.config.as_ref())?;
    if !a.checkpoints.is_empty() {
        let joined: Vec<String> = a.checkpoints.iter().map(|p| p.display().to_string()).collect();
        s.set("checkpoints", joined.join(","))?;
    }
    overrides!(s, a; dump, methods, budget_rate, budget, values, bits, seed, out, csv);
    let seed = s.seed()?;
    let dump = load_dump(&required_path(&s, "dump")?)?;
    let values = s
        .get::<bool>("values")?
        .then(|| gaussian_values(dump.n_keys(), dump.dim(), seed));
    let inst = AttentionInstance::causal_from_dump(&dump, values)?;

    let mut methods: Vec<(String, Box<dyn Retriever>)> = Vec::new();
    for name in s.get_list::<String>("methods")? {
        methods.push((name.clone(), baseline(&name, dump.dim(), s.get("bits")?, seed)?));
    }
    for path in s.get_list::<PathBuf>("checkpoints")? {
        methods.push(checkpoint_retriever(&path)?);
    }
    if methods.is_empty() {
        return Err(CliError::usage("no methods or checkpoints to evaluate"));
    }
    let labelled: Vec<(&str, &dyn Retriever)> = methods.iter().map(|(l, r)| (l.as_str(), r.as_ref())).collect();

    let explicit: Vec<usize> = s.get_list("budget")?;
    let budgets: Vec<(String, usize)> = if explicit.is_empty() {
        s.get_list::<f64>("budget_rate")?
            .into_iter()
            .map(|r| (format!("{r}"), budget_from_rate(r, inst.n_keys())))
            .collect()
    } else {
        explicit.into_iter().map(|k| ("explicit".to_string(), k)).collect()
    };
    if budgets.is_empty() {
        return Err(CliError::usage("no budgets requested"));
    }

    let mut reports: Vec<(String, EvalReport)> = Vec::new();
    for (rate, k) in budgets {
        reports.push((rate, evaluate(&inst, &labelled, k)?));
    }

    let mut text = s.provenance("# ")?;
    let mut table = format!("{:<28} {:>8} {:>10} {:>14}\n", "method", "budget", "mean_iou", "output_rel_err");
    let mut csv = String::from("budget,query");
    for (l, _) in &labelled {
        csv.push(',');
        csv.push_str(l);
    }
    csv.push('\n');
    for (rate, r) in &reports {
        let _ = writeln!(text, "\n# budget_rate = {rate}");
        text.push_str(&r.to_text());
        for m in &r.methods {
            let err = m.output_rel_error.map_or("n/a".to_string(), |e| format!("{e:.3e}"));
            let _ = writeln!(table, "{:<28} {:>8} {:>10.4} {:>14}", m.label, r.budget, m.mean_iou, err);
        }
        for q in 0..r.n_queries {
            let _ = write!(csv, "{},{q}", r.budget);
            for m in &r.methods {
                let _ = write!(csv, ",{:.6}", m.per_query_iou[q]);
            }
            csv.push('\n');
        }
    }
    let out = required_path(&s, "out")?;
    write_text(&out, &text)?;
    if !s.raw("csv").is_empty() {
        write_text(Path::new(s.raw("csv")), &(s.provenance("# ")? + &csv))?;
    }
    print!("{}", s.provenance("")?);
    print!("{table}");
    println!("wrote {}", out.display());
    Ok(())
}

const BENCH_DEFAULTS: &[(&str, &str)] = &[
    ("sizes", "4096,65536,524288"),
    ("bits", "128"),
    ("trials", "30"),
    ("warmup", "3"),
    ("budget_rate", "0.02"),
    ("memory_limit_mb", "2048"),
    ("seed", "0"),
    ("out", ""),
];

struct Timing {
    median_us: f64,
    min_us: f64,
    max_us: f64,
}

fn time_trials(trials: usize, warmup: usize, mut f: impl FnMut()) -> Timing {
    for _ in 0..warmup {
        f();
    }
    let mut us: Vec<f64> = (0..trials)
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_secs_f64() * 1e6
        })
        .collect();
    us.sort_by(f64::total_cmp);
    let mid = us.len() / 2;
    let median_us = if us.len() % 2 == 0 {
        (us[mid - 1] + us[mid]) / 2.0
    } else {
        us[mid]
    };
    Timing {
        median_us,
        min_us: us[0],
        max_us: us[us.len() - 1],
    }
}

fn bench_bits(count: usize, seed: u64) -> Result<Vec<bool>, CliError> {
    let mut v = Vec::new();
    v.try_reserve_exact(count)
        .map_err(|_| CliError::data(format!("cannot allocate {count} bits for the benchmark")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    v.extend((0..count).map(|_| rng.random::<bool>()));
    Ok(v)
}

pub fn bench(a: BenchArgs) -> CmdResult {
    let mut s = settings("bench", BENCH_DEFAULTS, a.config.as_ref())?;
    overrides!(s, a; sizes, bits, trials, warmup, budget_rate, memory_limit_mb, seed, out);
    let seed = s.seed()?;
    let sizes: Vec<usize> = s.get_list("sizes")?;
    let bits: usize = s.get("bits")?;
    let trials: usize = s.get("trials")?;
    let warmup: usize = s.get("warmup")?;
    let rate: f64 = s.get("budget_rate")?;
    let limit = s.get::<usize>("memory_limit_mb")? << 20;
    if trials == 0 {
        return Err(CliError::usage("trials must be at least 1"));
    }

    let mut csv = s.provenance("# ")?;
    csv.push_str("# CPU timings from this machine; not comparable to the reference GPU kernel figure\n");
    csv.push_str("op,n,bits,k,trials,median_us,min_us,max_us\n");
    for &n in &sizes {
        // unpacked bools plus packed words plus scores
        let need = n * bits + n * bits / 8 + n * 4;
        if need > limit {
            return Err(CliError::data(format!(
                "n = {n} needs about {} MiB, above the {} MiB limit",
                need >> 20,
                limit >> 20
            )));
        }
        let raw = bench_bits(n * bits, seed.wrapping_add(n as u64))?;
        let pack = time_trials(trials, warmup, || {
            std::hint::black_box(pack_bits(std::hint::black_box(&raw), bits).expect("valid shape"));
        });
        let codes = pack_bits(&raw, bits)?;
        drop(raw);
        let query = pack_bits(&bench_bits(bits, seed ^ 0xabcd)?, bits)?.row(0);
        let k = budget_from_rate(rate, n);
        let scan = time_trials(trials, warmup, || {
            let scores = nxor_scores(&query, &codes).expect("matching lengths");
            std::hint::black_box(top_k_indices(&scores, k).expect("k within range"));
        });
        for (op, t) in [("pack_bits", pack), ("nxor_topk", scan)] {
            let _ = writeln!(
                csv,
                "{op},{n},{bits},{k},{trials},{:.2},{:.2},{:.2}",
                t.median_us, t.min_us, t.max_us
            );
        }
    }
    print!("{csv}");
    if !s.raw("out").is_empty() {
        write_text(Path::new(s.raw("out")), &csv)?;
    }
    Ok(())
}
