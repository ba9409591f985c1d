use std::path::Path;

use dpsc::data::{CIFAR_TEST_FILE, CIFAR_TRAIN_FILES};
use dpsc::nn::GroupSpec;
use dpsc_cli::config::Arch;
use dpsc_cli::experiment::{run_convergence, ConvergencePlan};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Writes CIFAR-10-format batches whose images carry a label-dependent
/// brightness per channel plus noise.
fn write_fixture(dir: &Path, per_file: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut batch = |name: &str| {
        let mut bytes = Vec::new();
        for i in 0..per_file {
            let label = (i % 10) as u8;
            bytes.push(label);
            for c in 0..3 {
                let base = 40 + 20 * ((label as usize + c * 3) % 10);
                for _ in 0..1024 {
                    bytes.push((base + rng.random_range(0..30)) as u8);
                }
            }
        }
        std::fs::write(dir.join(name), bytes).unwrap();
    };
    for f in CIFAR_TRAIN_FILES {
        batch(f);
    }
    batch(CIFAR_TEST_FILE);
}

#[test]
fn convergence_comparison_runs_on_fixture() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path(), 30);
    let plan = ConvergencePlan {
        arch: Arch::Tiny,
        groups: GroupSpec::Count(4),
        train_subset: 100,
        epochs: 2,
        lot_size: 25,
        seeds: vec![0, 1],
        ..ConvergencePlan::standard(dir.path().to_path_buf())
    };
    let mut seen = 0;
    let out = run_convergence(&plan, |_| seen += 1).unwrap();
    assert_eq!(seen, 4);
    assert_eq!(out.runs.len(), 4);
    assert_eq!(out.steps, 8);
    assert!((out.q - 0.25).abs() < 1e-12);
    for r in &out.runs {
        assert!((0.0..=1.0).contains(&r.test_acc));
        assert!(r.epsilon <= 7.42 + 1e-9 && r.epsilon > 7.42 - 1e-3);
    }
    assert_eq!(
        out.median_scale_norm,
        (out.runs[0].test_acc + out.runs[2].test_acc) / 2.0
    );

    let missing = ConvergencePlan::standard(dir.path().join("absent"));
    assert_eq!(run_convergence(&missing, |_| {}).unwrap_err().code(), 3);
}
