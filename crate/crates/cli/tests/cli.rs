use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_oprc");

fn fixture(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures").join(rel)
}

fn oprc(args: &[&str], base_port: u16) -> Output {
    Command::new(BIN)
        .args(args)
        .env("OPRC_CONTROL", format!("http://127.0.0.1:{base_port}"))
        .env("OPRC_INGRESS", format!("http://127.0.0.1:{}", base_port + 1))
        .output()
        .expect("run oprc")
}

fn json_out(o: &Output) -> Value {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).expect("json on stdout")
}

fn free_port() -> u16 {
    std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

struct Reaper(Child);

impl Drop for Reaper {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn wait_listening(addr: &str) {
    let start = Instant::now();
    while start.elapsed() < Duration::from_secs(20) {
        if std::net::TcpStream::connect(addr).is_ok() {
            return;
        }
        std::thread::sleep(Duration::from_millis(50));
    }
    panic!("{addr} never came up");
}

#[tokio::test]
async fn echo_runtime_answers_the_golden_fixture() {
    let port = free_port();
    let _child = Reaper(
        Command::new(BIN)
            .args(["runtime", "echo"])
            .env("PORT", port.to_string())
            .spawn()
            .unwrap(),
    );
    wait_listening(&format!("127.0.0.1:{port}"));
    let request: Value = serde_json::from_str(&std::fs::read_to_string(fixture("task-protocol/01-echo.request.json")).unwrap()).unwrap();
    let expected: Value = serde_json::from_str(&std::fs::read_to_string(fixture("task-protocol/01-echo.response.json")).unwrap()).unwrap();
    let got: Value = reqwest::Client::new()
        .post(format!("http://127.0.0.1:{port}/"))
        .json(&request)
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(got, expected);
}

#[test]
fn scenario_run_passes_and_is_reproducible() {
    let file = fixture("scenarios/chaos.yaml");
    let run = || {
        Command::new(BIN)
            .args(["scenario", "run", file.to_str().unwrap(), "--objects", "8", "--invocations", "150", "--trace"])
            .output()
            .unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&a.stderr));
    let trace = |o: &Output| {
        String::from_utf8_lossy(&o.stdout)
            .lines()
            .take_while(|l| !l.starts_with('{'))
            .map(str::to_string)
            .collect::<Vec<_>>()
    };
    assert!(!trace(&a).is_empty());
    assert_eq!(trace(&a), trace(&b));
}

#[test]
fn unknown_fault_point_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("bad.yaml");
    std::fs::write(&file, "- at: SOMETIMES\n").unwrap();
    let o = Command::new(BIN).args(["scenario", "run", file.to_str().unwrap()]).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown fault point"));
}

#[test]
fn down_without_a_cluster_is_fine() {
    let o = oprc(&["cluster", "down"], free_port());
    assert!(o.status.success());
}

#[test]
fn cluster_verbs_end_to_end() {
    const BASE: u16 = 18900;
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let demo = fixture("packages/demo.yaml");
    let mut child = Command::new(BIN)
        .args(["cluster", "up", "-n", "2", "--base-port", &BASE.to_string(), "--data-dir"])
        .arg(&data)
        .arg("--package")
        .arg(&demo)
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let stdout = child.stdout.take().unwrap();
    let mut up = Reaper(child);
    let mut banner = String::new();
    for line in BufReader::new(stdout).lines() {
        let line = line.unwrap();
        banner.push_str(&line);
        if line == "}" {
            break;
        }
    }
    let banner: Value = serde_json::from_str(&banner).unwrap();
    assert_eq!(banner["invokers"].as_array().unwrap().len(), 2);

    let report = json_out(&oprc(&["pkg", "apply", demo.to_str().unwrap()], BASE));
    assert_eq!(report["package"], "demo");
    let created = json_out(&oprc(&["obj", "new", "c1", "--class", "demo.counter"], BASE));
    assert_eq!(created["status"], "DONE");
    let r = json_out(&oprc(&["invoke", "c1", "increment", "--arg", "by=5", "--id", "i1"], BASE));
    assert_eq!(r["returnDoc"]["counter"], 5);
    let a = json_out(&oprc(&["invoke", "c1", "increment", "--async", "--id", "i2"], BASE));
    assert_eq!(a["invocationId"], "i2");
    let start = Instant::now();
    loop {
        let r = json_out(&oprc(&["result", "i2"], BASE));
        if r["status"] == "DONE" {
            assert_eq!(r["returnDoc"]["counter"], 6);
            break;
        }
        assert!(start.elapsed() < Duration::from_secs(20), "async call never finished");
        std::thread::sleep(Duration::from_millis(50));
    }
    let ring = json_out(&oprc(&["ring"], BASE));
    assert!(ring.to_string().contains("inv-1"));
    json_out(&oprc(&["gc", "run"], BASE));
    let missing = oprc(&["invoke", "nope", "increment"], BASE);
    assert_eq!(missing.status.code(), Some(1));

    assert!(oprc(&["cluster", "down"], BASE).status.success());
    let status = up.0.wait().unwrap();
    assert!(status.success());
    assert!(oprc(&["cluster", "down"], BASE).status.success());

    let dump = Command::new(BIN).args(["log", "dump"]).arg(data.join("log")).output().unwrap();
    assert!(dump.status.success());
    let text = String::from_utf8_lossy(&dump.stdout);
    assert!(text.lines().any(|l| l.contains("\ti2\t")), "{text}");
}

#[test]
fn local_process_engine_runs_the_echo_runtime() {
    const BASE: u16 = 18950;
    let dir = tempfile::tempdir().unwrap();
    let pkg = dir.path().join("proc.yaml");
    std::fs::write(
        &pkg,
        format!(
            "name: proc\nclasses:\n  - name: thing\n    bindings:\n      - {{name: new, function: builtin.new}}\n      - {{name: echo, function: echo}}\n      - {{name: get, function: builtin.get}}\nfunctions:\n  - {{name: echo, kind: TASK, image: \"{BIN} runtime echo\"}}\n"
        ),
    )
    .unwrap();
    let mut child = Command::new(BIN)
        .args(["cluster", "up", "-n", "1", "--engine", "local-process", "--base-port", &BASE.to_string(), "--data-dir"])
        .arg(dir.path().join("data"))
        .arg("--package")
        .arg(&pkg)
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let stdout = child.stdout.take().unwrap();
    let mut up = Reaper(child);
    for line in BufReader::new(stdout).lines() {
        if line.unwrap() == "}" {
            break;
        }
    }
    json_out(&oprc(&["obj", "new", "t1", "--class", "proc.thing"], BASE));
    let r = json_out(&oprc(&["invoke", "t1", "echo", "--arg", "k=v"], BASE));
    assert_eq!(r["status"], "DONE");
    let rec = json_out(&oprc(&["invoke", "t1", "get"], BASE));
    assert_eq!(rec["returnDoc"]["doc"], serde_json::json!({"k": "v"}));
    assert!(oprc(&["cluster", "down"], BASE).status.success());
    assert!(up.0.wait().unwrap().success());
}
