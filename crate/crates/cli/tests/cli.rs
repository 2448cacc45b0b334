use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_moe-prefetch"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

const SMALL: [&str; 6] = ["--layers", "3", "--experts", "8", "--topk", "2"];

fn gen(dir: &Path) {
    let mut args = vec!["gen-traces", "--prompts", "3", "--tokens", "10", "--hot", "3", "--out", "t.csv", "--oracle-out", "o.jsonl"];
    args.extend(SMALL);
    assert!(run(&args, dir).status.success());
}

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    args.iter().copied().chain(SMALL).collect()
}

#[test]
fn generated_traces_start_with_the_header() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path());
    let text = std::fs::read_to_string(dir.path().join("t.csv")).unwrap();
    assert!(text.starts_with("prompt_id,token_index,layer_id,expert_ids,token_id,embedding\n"));
    assert_eq!(text.lines().count(), 1 + 3 * 10 * 3);
}

#[test]
fn oracle_simulation_reports_perfect_rates() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path());
    let out = run(&with_small(&["simulate", "--traces", "t.csv", "--predictor", "oracle", "--capacity-entries", "2", "--budget", "2", "--warmup", "0"]), dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    let all = stdout.lines().last().unwrap();
    assert_eq!(all, "all,180,180,1.000000,180,180,1.000000,90,0");
}

#[test]
fn warmup_past_the_prompt_prints_na() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path());
    let out = run(&with_small(&["simulate", "--traces", "t.csv", "--predictor", "lru-only", "--capacity", "0.5", "--warmup", "50"]), dir.path());
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert_eq!(stdout.lines().last().unwrap(), "all,0,0,n/a,0,0,n/a,0,0");
}

#[test]
fn config_file_supplies_flags_and_explicit_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path());
    std::fs::write(
        dir.path().join("run.cfg"),
        "# lru baseline\npredictor=lru-only\ncapacity=0.05\nwarmup=0\nlayers=3\nexperts=8\ntopk=2\n",
    )
    .unwrap();
    let from_file = run(&["simulate", "--config", "run.cfg", "--traces", "t.csv", "--capacity", "1.0"], dir.path());
    assert!(from_file.status.success(), "{}", String::from_utf8_lossy(&from_file.stderr));
    let explicit = run(&with_small(&["simulate", "--traces", "t.csv", "--predictor", "lru-only", "--capacity", "1.0", "--warmup", "0"]), dir.path());
    assert_eq!(from_file.stdout, explicit.stdout);
}

#[test]
fn exit_codes_separate_usage_from_runtime_errors() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path());
    let code = |args: &[&str]| run(&with_small(args), dir.path()).status.code();

    assert_eq!(code(&["simulate", "--no-such-flag"]), Some(2));
    assert_eq!(code(&["simulate", "--traces", "missing.csv", "--predictor", "oracle", "--capacity", "0.1"]), Some(2));
    assert_eq!(code(&["simulate", "--traces", "t.csv", "--predictor", "eam-cosine", "--capacity", "0.1"]), Some(2));
    assert_eq!(code(&["simulate", "--traces", "t.csv", "--predictor", "oracle", "--capacity", "1.5"]), Some(2));

    std::fs::write(dir.path().join("bad.csv"), "prompt_id,token_index,layer_id,expert_ids,token_id,embedding\n0,0,0,1|2|3,5,\n").unwrap();
    let out = run(&with_small(&["report-activations", "--traces", "bad.csv"]), dir.path());
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert_eq!(stderr.lines().count(), 1, "{stderr}");
    assert!(stderr.contains("line 2"), "{stderr}");

    // Output directory that does not exist is a runtime failure.
    assert_eq!(code(&["report-activations", "--traces", "t.csv", "--out", "no/such/dir/out.csv"]), Some(1));
}

#[test]
fn help_documents_file_schemas() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["eval-predictions", "--help"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let help = String::from_utf8(out.stdout).unwrap();
    assert!(help.contains("\"experts\""));
    assert!(help.contains("macro_f1"));
    let out = run(&["gen-traces", "--help"], dir.path());
    assert!(String::from_utf8(out.stdout).unwrap().contains("prompt_id,token_index,layer_id,expert_ids,token_id,embedding"));
}

#[test]
fn eval_of_oracle_file_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path());
    let out = run(&with_small(&["eval-predictions", "--traces", "t.csv", "--predictions", "o.jsonl"]), dir.path());
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("position_accuracy,1.000000"));
    assert!(stdout.contains("macro_f1,1.000000"));
}
