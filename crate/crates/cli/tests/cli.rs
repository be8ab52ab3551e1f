use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "n_seen = 2
n_unseen = 1
d_in = 8
n_classes = 12
n_way_max = 4
way_min = 2
way_max = 4
shot_max = 2
n_query = 3
hidden_dims = 8,8
embed_dim = 8
pretrain_episodes = 10
train_episodes = 10
population = 4
top_m = 2
generations = 2
search_epochs = 2
test_epochs = 2
test_episodes = 3
";

fn nfts(dir: &Path, args: &[&str]) -> Output {
    let config = dir.join("tiny.cfg");
    fs::write(&config, TINY).unwrap();
    Command::new(env!("CARGO_BIN_EXE_nfts"))
        .arg("--config")
        .arg(&config)
        .arg("--out-dir")
        .arg(dir.join("out"))
        .args(args)
        .env_remove("NFTS_OUT_DIR")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stage(dir: &Path, args: &[&str]) {
    let o = nfts(dir, args);
    assert!(o.status.success(), "{args:?}: {}", stderr(&o));
}

#[test]
fn usage_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(nfts(dir.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(nfts(dir.path(), &["search", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(nfts(dir.path(), &["eval", "--method", "best"]).status.code(), Some(2));
    assert_eq!(nfts(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn bad_config_is_a_run_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = nfts(dir.path(), &["--set", "population=lots", "pretrain"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("population"), "{}", stderr(&o));
}

#[test]
fn search_without_checkpoint_names_the_missing_stage() {
    let dir = tempfile::tempdir().unwrap();
    let o = nfts(dir.path(), &["search"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("train-supernet"), "{}", stderr(&o));
}

fn run_to_shortlist(dir: &Path) {
    for s in ["pretrain", "train-supernet", "search", "shortlist"] {
        stage(dir, &[s]);
    }
}

#[test]
fn eval_writes_one_row_per_episode_and_domain() {
    let dir = tempfile::tempdir().unwrap();
    run_to_shortlist(dir.path());
    stage(dir.path(), &["eval", "--method", "nftsN", "--episodes", "4"]);
    let text = fs::read_to_string(dir.path().join("out/results_nftsN.csv")).unwrap();
    let rows = text.lines().filter(|l| !l.starts_with('#')).count() - 1;
    // one unseen domain plus the test splits of two seen domains
    assert_eq!(rows, 4 * 3);
}

#[test]
fn same_seed_same_outputs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [a.path(), b.path()] {
        run_to_shortlist(dir);
        for s in ["ablate", "analyze", "export"] {
            stage(dir, &[s]);
        }
    }
    for f in ["supernet.ckpt", "search_history.csv", "shortlist.txt", "ablation.csv", "point_biserial.csv", "snapshots.csv"] {
        assert_eq!(
            fs::read(a.path().join("out").join(f)).unwrap(),
            fs::read(b.path().join("out").join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn print_config_reflects_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let o = nfts(dir.path(), &["--set", "population=6", "--seed", "77", "--print-config", "search"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.lines().any(|l| l == "population = 6"), "{text}");
    assert!(text.lines().any(|l| l == "seed = 77"), "{text}");
}
