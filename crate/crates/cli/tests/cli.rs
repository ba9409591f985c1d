use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dpsc::checkpoint;
use dpsc::data::{synth_blobs, BlobConfig};
use dpsc::nn::{mlp, tiny, GroupSpec, Model};
use dpsc_cli::commands::{self, AccountArgs};
use dpsc_cli::config::{Arch, DataSource, Noise, RunConfig, Validation};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn dpsc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dpsc")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn value(text: &str, key: &str) -> f64 {
    let prefix = format!("{key}=");
    text.lines()
        .flat_map(|l| l.split_whitespace())
        .find_map(|w| w.strip_prefix(&prefix))
        .unwrap_or_else(|| panic!("no `{key}` in\n{text}"))
        .parse()
        .unwrap()
}

const BLOB_CONFIG: &str = "\
# synthetic blobs
architecture = tiny
scale_norm = true
groups = 4
width = 8
data = synth:n=512,classes=2,size=8,noise=1.0,seed=0
epochs = 10
lot_size = 64
clip = 1.5
sigma = 0.5   # noise multiplier
lr = 0.001
ema_tau = 0.9999
seed = 0
";

fn write_config(dir: &Path, name: &str, body: &str, out: &Path) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, format!("{body}out_dir = {}\n", out.display())).unwrap();
    path
}

// ---- configuration ----

#[test]
fn config_parses_comments_and_defaults() {
    let cfg = RunConfig::parse(&format!("{BLOB_CONFIG}out_dir = runs/a\n")).unwrap();
    assert_eq!(cfg.architecture, Arch::Tiny);
    assert_eq!(cfg.noise, Noise::Sigma(0.5));
    assert_eq!(cfg.delta, 1e-5);
    assert_eq!(cfg.validation, Validation::None);
    assert!(cfg.dp);
    assert_eq!(cfg.multiplicity, 1);
    assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
}

#[test]
fn config_rejects_bad_files() {
    let base = format!("{BLOB_CONFIG}out_dir = x\n");
    let cases = [
        format!("{base}bogus = 1\n"),
        format!("{base}epochs = 3\n"),
        format!("{base}target_epsilon = 3\n"),
        base.replace("sigma = 0.5   # noise multiplier\n", ""),
        base.replace("tiny", "resnet18"),
        base.replace("lot_size = 64", "lot_size = 0"),
        format!("{base}delta = 2\n"),
        format!("{base}validation = test\n"),
        format!("{base}not a pair\n"),
    ];
    for c in &cases {
        let e = RunConfig::parse(c).unwrap_err();
        assert_eq!(e.code(), 2, "{c}");
    }
}

fn arb_config() -> impl Strategy<Value = RunConfig> {
    let arch = prop_oneof![
        Just(Arch::Resnet9),
        Just(Arch::Wrn16_4),
        Just(Arch::Tiny),
        Just(Arch::Mlp)
    ];
    let groups = prop_oneof![(1usize..64).prop_map(GroupSpec::Count), Just(GroupSpec::PerChannel)];
    let data = prop_oneof![
        "[a-z/]{1,12}".prop_map(|p| DataSource::Cifar10(PathBuf::from(p))),
        "[a-z/.]{1,12}".prop_map(|p| DataSource::Raw(PathBuf::from(p))),
        (1usize..2000, 1usize..10, 1usize..16, 0.0f64..3.0, any::<u64>()).prop_map(
            |(n, classes, size, noise, seed)| {
                DataSource::Synth(BlobConfig {
                    n,
                    classes,
                    size,
                    noise,
                    seed,
                })
            }
        ),
    ];
    let noise = prop_oneof![
        (0.0f64..20.0).prop_map(Noise::Sigma),
        (0.01f64..20.0).prop_map(Noise::TargetEpsilon)
    ];
    let validation = prop_oneof![Just(Validation::None), (0.01f64..0.99).prop_map(Validation::Holdout)];
    (
        (
            arch,
            any::<bool>(),
            groups,
            1usize..64,
            data,
            prop::option::of(1usize..5000),
            validation,
        ),
        (
            0usize..100,
            1usize..4096,
            0.01f64..10.0,
            noise,
            1e-9f64..1.0,
            prop::option::of(0.1f64..50.0),
        ),
        (
            any::<bool>(),
            1e-6f64..1.0,
            1usize..8,
            prop::option::of(0.0f64..0.99999),
            any::<u64>(),
            "[a-z_/]{1,16}",
        ),
    )
        .prop_map(
            |(
                (architecture, scale_norm, groups, width, data, train_subset, validation),
                (epochs, lot_size, clip, noise, delta, epsilon_ceiling),
                (dp, lr, multiplicity, ema_tau, seed, out),
            )| RunConfig {
                architecture,
                scale_norm,
                groups,
                width,
                data,
                train_subset,
                validation,
                epochs,
                lot_size,
                clip,
                noise,
                delta,
                epsilon_ceiling,
                dp,
                lr,
                multiplicity,
                ema_tau,
                seed,
                out_dir: PathBuf::from(out),
            },
        )
}

proptest! {
    #[test]
    fn config_round_trips(cfg in arb_config()) {
        let text = cfg.to_text();
        let back = RunConfig::parse(&text).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.to_text(), text);
    }
}

#[test]
fn data_source_strings() {
    let s: DataSource = "synth".parse().unwrap();
    assert_eq!(s, DataSource::Synth(BlobConfig::default()));
    let s: DataSource = "synth:n=64,classes=3".parse().unwrap();
    assert_eq!(s.to_string(), "synth:n=64,classes=3,size=8,noise=1,seed=0");
    assert!("synth:m=3".parse::<DataSource>().is_err());
    assert!("imagenet:/x".parse::<DataSource>().is_err());
    assert_eq!(
        "raw:a.dpsc".parse::<DataSource>().unwrap(),
        DataSource::Raw("a.dpsc".into())
    );
}

// ---- train ----

#[test]
fn dry_run_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = write_config(
        dir.path(),
        "c.cfg",
        &BLOB_CONFIG.replace("sigma = 0.5   # noise multiplier", "target_epsilon = 8"),
        &out,
    );
    let o = dpsc(&["train", cfg.to_str().unwrap(), "--dry-run"]);
    assert!(o.status.success(), "{o:?}");
    let text = stdout(&o);
    assert_eq!(value(&text, "parameters"), 2690.0);
    let sigma = value(&text, "sigma");
    assert!(sigma > 0.3 && sigma < 100.0);
    assert!((value(&text, "planned_epsilon") - 8.0).abs() < 1e-3);
    assert!(!out.exists());
}

#[test]
fn blob_training_is_accurate_deterministic_and_matches_golden() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let cfg = write_config(dir.path(), "c.cfg", BLOB_CONFIG, out);
        let o = dpsc(&["train", cfg.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let ma = std::fs::read(a.join(commands::METRICS_FILE)).unwrap();
    let mb = std::fs::read(b.join(commands::METRICS_FILE)).unwrap();
    assert_eq!(ma, mb);
    let golden = std::fs::read(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/blob_metrics.csv")).unwrap();
    assert_eq!(String::from_utf8_lossy(&ma), String::from_utf8_lossy(&golden));

    let metrics = String::from_utf8(ma).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next(), Some(commands::METRICS_HEADER));
    assert_eq!(lines.count(), 10);
    let summary = std::fs::read_to_string(a.join(commands::SUMMARY_FILE)).unwrap();
    assert!(value(&summary, "final_train_acc") >= 0.9);
    assert_eq!(value(&summary, "clip_violations"), 0.0);
    assert!(value(&summary, "clip_max_norm_after") <= 1.5 + 1e-6);
    assert!(summary.contains("unaccounted_feedback=true"));

    // both checkpoints hold raw and EMA weights
    for name in [commands::FINAL_CHECKPOINT, commands::BEST_CHECKPOINT] {
        let c = checkpoint::load::<f32>(&a.join(name)).unwrap();
        assert!(c.ema.is_some());
    }
    assert_eq!(
        std::fs::read(a.join(commands::FINAL_CHECKPOINT)).unwrap(),
        std::fs::read(b.join(commands::FINAL_CHECKPOINT)).unwrap()
    );
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let bad = write_config(dir.path(), "bad.cfg", &format!("{BLOB_CONFIG}bogus = 1\n"), &out);
    assert_eq!(dpsc(&["train", bad.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(dpsc(&["train", "/nonexistent/config"]).status.code(), Some(2));

    let missing = BLOB_CONFIG.replace(
        "synth:n=512,classes=2,size=8,noise=1.0,seed=0",
        "cifar10:/nonexistent/cifar",
    );
    let cfg = write_config(dir.path(), "missing.cfg", &missing, &out);
    assert_eq!(dpsc(&["train", cfg.to_str().unwrap()]).status.code(), Some(3));
    assert!(!out.exists());

    let capped = format!("{BLOB_CONFIG}epsilon_ceiling = 20\n");
    let cfg = write_config(dir.path(), "capped.cfg", &capped, &out);
    let o = dpsc(&["train", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = std::fs::read_to_string(out.join(commands::SUMMARY_FILE)).unwrap();
    assert!(summary.contains("status=budget_exceeded"));
    assert!(!out.join(commands::FINAL_CHECKPOINT).exists());
    // the epochs that did finish stay within the ceiling
    let metrics = std::fs::read_to_string(out.join(commands::METRICS_FILE)).unwrap();
    for line in metrics.lines().skip(1) {
        let eps: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert!(eps <= 20.0);
    }

    assert_eq!(
        dpsc(&["paramcount", "--arch", "resnet9", "--groups", "0"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(dpsc(&["account", "--q", "0.1", "--steps", "10"]).status.code(), Some(2));
}

#[test]
fn holdout_and_subset_splits() {
    let cfg = RunConfig::parse(&format!(
        "{}train_subset = 100\nvalidation = holdout:0.2\nout_dir = x\n",
        BLOB_CONFIG
    ))
    .unwrap();
    let s = commands::load_splits(&cfg).unwrap();
    assert_eq!(s.train.len(), 80);
    assert_eq!(s.val.as_ref().unwrap().len(), 20);
    assert!(s.test.is_none());
    let again = commands::load_splits(&cfg).unwrap();
    assert_eq!(again.train.labels, s.train.labels);
    assert_eq!(again.val.unwrap().images, s.val.unwrap().images);
}

// ---- account ----

fn account(args: AccountArgs) -> String {
    let mut buf = Vec::new();
    commands::account(&args, &mut buf).unwrap();
    String::from_utf8(buf).unwrap()
}

#[test]
fn account_single_gaussian_step() {
    let o = dpsc(&["account", "--q", "1", "--sigma", "1", "--steps", "1", "--delta", "1e-5"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let closed_form = 0.5 + (2.0 * 1e5f64.ln()).sqrt();
    assert!((value(&text, "epsilon") - closed_form).abs() < 0.02);
    assert!(text.starts_with("alpha,rdp,epsilon\n"));
}

#[test]
fn account_zero_rate_and_round_trip() {
    let text = account(AccountArgs {
        q: Some(0.0),
        sigma: Some(1.0),
        steps: Some(1000),
        delta: 1e-5,
        target_epsilon: None,
    });
    assert_eq!(value(&text, "epsilon"), 0.0);

    let text = account(AccountArgs {
        q: Some(0.01),
        sigma: None,
        steps: Some(5000),
        delta: 1e-5,
        target_epsilon: Some(3.0),
    });
    let sigma = value(&text, "sigma");
    let again = account(AccountArgs {
        q: Some(0.01),
        sigma: Some(sigma),
        steps: Some(5000),
        delta: 1e-5,
        target_epsilon: None,
    });
    assert!((value(&again, "epsilon") - 3.0).abs() < 1e-3);
}

// ---- hessian ----

fn toy_checkpoint(dir: &Path) -> PathBuf {
    let model = Model::<f32>::init(mlp([3, 2, 2], 16, 3), 0).unwrap();
    assert!(model.params.numel() <= 300);
    let path = dir.join("toy.dpsc");
    checkpoint::save(&path, &model, None).unwrap();
    path
}

const TOY_DATA: &str = "synth:n=64,classes=3,size=2";

#[test]
fn hessian_trace_matches_explicit_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = toy_checkpoint(dir.path());
    let out = dir.path().join("h");
    let args = [
        "hessian",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        TOY_DATA,
        "--out",
        out.to_str().unwrap(),
    ];
    let o = dpsc(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = stdout(&o);

    // oracle: central differences of the analytic gradient at the stored weights
    let mut model = checkpoint::load::<f64>(&ckpt).unwrap().model;
    let data = synth_blobs(
        &TOY_DATA
            .parse::<DataSource>()
            .map(|d| match d {
                DataSource::Synth(c) => c,
                _ => unreachable!(),
            })
            .unwrap(),
    )
    .unwrap()
    .cast::<f64>();
    let theta = model.params.to_flat();
    let n = theta.len();
    let mut h = vec![0.0; n * n];
    for i in 0..n {
        let mut g = |d: f64| {
            let mut t = theta.clone();
            t[i] += d;
            model.params.assign_flat(&t).unwrap();
            model.loss_and_grad(&data.images, &data.labels).unwrap().1
        };
        let (gp, gm) = (g(1e-5), g(-1e-5));
        for j in 0..n {
            h[j * n + i] = (gp[j] - gm[j]) / 2e-5;
        }
    }
    let trace: f64 = (0..n).map(|i| h[i * n + i]).sum();
    assert!(((value(&report, "trace") - trace) / trace).abs() < 1e-2);
    let m = DMatrix::from_row_slice(n, n, &h);
    let top = (&m + m.transpose())
        .scale(0.5)
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .fold(0.0f64, |a, &b| if b.abs() > a.abs() { b } else { a });
    assert!(((value(&report, "lambda_max") - top) / top).abs() < 5e-3);

    assert_eq!(std::fs::read_to_string(out.join("hessian.txt")).unwrap(), report);
    assert!(std::fs::read_to_string(out.join("eigenvalues.csv"))
        .unwrap()
        .starts_with("index,eigenvalue"));
    // same seed, same bytes
    assert_eq!(stdout(&dpsc(&args)), report);
}

#[test]
fn hessian_k1_and_load_failures() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = toy_checkpoint(dir.path());
    let o = dpsc(&[
        "hessian",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        TOY_DATA,
        "--k",
        "1",
    ]);
    assert!(o.status.success());
    let keys: Vec<String> = stdout(&o)
        .lines()
        .map(|l| l.split('=').next().unwrap().to_string())
        .collect();
    assert!(keys.contains(&"trace".to_string()) && keys.contains(&"lambda_max".to_string()));
    assert!(!keys
        .iter()
        .any(|k| k == "lambda_min" || k == "negative_count" || k == "condition"));

    let o = dpsc(&["hessian", "--checkpoint", "/nonexistent.dpsc", "--data", TOY_DATA]);
    assert_eq!(o.status.code(), Some(3));
    let o = dpsc(&[
        "hessian",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        "synth:size=4",
    ]);
    assert_eq!(o.status.code(), Some(3));
}

// ---- histogram ----

#[test]
fn histogram_of_scale_norm_tap_at_init() {
    let dir = tempfile::tempdir().unwrap();
    let model = Model::<f32>::init(tiny(true, GroupSpec::Count(4), 8), 0).unwrap();
    let ckpt = dir.path().join("init.dpsc");
    checkpoint::save(&ckpt, &model, None).unwrap();
    let tap = model
        .spec
        .taps()
        .into_iter()
        .find(|t| t.ends_with("V_AS"))
        .unwrap()
        .replace("V_AS", "V_A^S");
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    for out in [&a, &b] {
        let o = dpsc(&[
            "histogram",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--tap",
            &tap,
            "--data",
            "synth",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let csv = std::fs::read_to_string(&a).unwrap();
    assert_eq!(csv, std::fs::read_to_string(&b).unwrap());
    let comment = csv.lines().last().unwrap();
    let std = comment
        .split(", ")
        .find_map(|p| p.strip_prefix("std="))
        .unwrap()
        .parse::<f64>()
        .unwrap();
    assert!((0.95..=1.05).contains(&std), "{comment}");
    assert_eq!(csv.lines().count(), 1 + dpsc::instrumentation::DEFAULT_BINS + 1);

    let bad = dir.path().join("bad.csv");
    let o = dpsc(&[
        "histogram",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--tap",
        "1.V_Q",
        "--data",
        "synth",
        "--out",
        bad.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!bad.exists());

    let o = dpsc(&[
        "histogram",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--tap",
        &tap,
        "--data",
        "synth",
        "--range",
        "-2:2",
        "--bins",
        "4",
        "--out",
        bad.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    assert!(std::fs::read_to_string(&bad)
        .unwrap()
        .starts_with("bin_lo,bin_hi,count\n-2,-1,"));
}

// ---- paramcount ----

fn total(args: &[&str]) -> f64 {
    let o = dpsc(args);
    assert!(o.status.success());
    value(&stdout(&o), "total")
}

#[test]
fn parameter_counts() {
    let r9 = total(&["paramcount", "--arch", "resnet9"]);
    assert!((r9 / 2_447_946.0 - 1.0).abs() < 0.01, "{r9}");
    let wrn = total(&["paramcount", "--arch", "wrn16_4"]);
    assert!((wrn / 2_752_506.0 - 1.0).abs() < 0.01, "{wrn}");
    let r9s = total(&["paramcount", "--arch", "resnet9", "--scale-norm"]);
    assert_eq!(r9s - r9, 768.0);
    let o = dpsc(&["paramcount", "--arch", "resnet9"]);
    assert!(stdout(&o).starts_with("layer,kind,params\n0,conv_block,"));
}
