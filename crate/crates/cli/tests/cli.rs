//! End-to-end checks of the command-line surface, driving the compiled
//! binary the way a user would.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_facecloak"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

const SMALL_DEMO: &[&str] = &[
    "demo",
    "--seed",
    "7",
    "--photos",
    "40",
    "--members",
    "4",
    "--stages",
    "2,3",
    "--window-edge",
    "6",
];

#[test]
fn demo_is_deterministic_under_seed() {
    let a = run(SMALL_DEMO);
    let b = run(SMALL_DEMO);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(stdout_of(&a), stdout_of(&b), "same seed, different stdout");
    assert!(stdout_of(&a).contains("oracle match: OK"));
    assert!(stdout_of(&a).contains("detect oracle: OK"));

    let c = run(&["demo", "--seed", "8", "--photos", "40", "--members", "4", "--stages", "2,3", "--window-edge", "6"]);
    assert_ne!(stdout_of(&a), stdout_of(&c), "different seeds, same stdout");
}

#[test]
fn demo_json_emits_one_object_per_line() {
    let mut args = SMALL_DEMO.to_vec();
    args.push("--json");
    let out = run(&args);
    assert!(out.status.success());
    let stdout = stdout_of(&out);
    let mut verdicts = 0;
    for line in stdout.lines() {
        let v: serde_json::Value = serde_json::from_str(line).expect("every line is JSON");
        assert!(v.get("event").is_some());
        if v["event"] == "verdict" {
            assert_eq!(v["status"], "OK");
            verdicts += 1;
        }
    }
    assert_eq!(verdicts, 2);
}

#[test]
fn usage_errors_exit_one() {
    let out = run(&["detect", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));

    let out = run(&["keygen", "--out", "/tmp/never-written.key"]);
    assert_eq!(out.status.code(), Some(1), "keygen without --dim or --content");
}

struct ServerGuard {
    child: Child,
    addr: String,
}

impl ServerGuard {
    fn start() -> Self {
        let mut child = bin()
            .args(["serve", "--listen", "127.0.0.1:0"])
            .stdout(Stdio::piped())
            .spawn()
            .expect("server starts");
        let line = {
            let stdout = child.stdout.as_mut().unwrap();
            let mut line = String::new();
            BufReader::new(stdout).read_line(&mut line).unwrap();
            line
        };
        let addr = line
            .trim()
            .strip_prefix("listening on ")
            .expect("server announces its address")
            .to_string();
        Self { child, addr }
    }
}

impl Drop for ServerGuard {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn write_pgm(path: &Path, width: usize, height: usize) {
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend((0..width * height).map(|i| ((i * 37 + 11) % 256) as u8));
    std::fs::write(path, bytes).unwrap();
}

#[test]
fn full_cli_flow_over_tcp() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).display().to_string();

    // Vendor-side artifacts.
    assert!(run(&["keygen", "--dim", "36", "--seed", "1", "--out", &p("sk.key")]).status.success());
    assert!(run(&[
        "gen-detector", "--stages", "2,2", "--window-edge", "6", "--seed", "2",
        "--out", &p("model.casc"),
    ])
    .status
    .success());
    assert!(run(&[
        "encrypt-detector", "--key", &p("sk.key"), "--model", &p("model.casc"),
        "--seed", "3", "--out", &p("detector.case"),
    ])
    .status
    .success());

    let server = ServerGuard::start();

    // Detection before any detector is registered is a protocol error.
    write_pgm(&dir.path().join("photo.pgm"), 16, 16);
    let out = run(&[
        "detect", "--connect", &server.addr, "--key", &p("sk.key"),
        "--image", &p("photo.pgm"), "--window-edge", "6", "--stride", "3", "--seed", "4",
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));

    // Vendor registers, then detection succeeds.
    assert!(run(&["publish", "--connect", &server.addr, "--detector", &p("detector.case")])
        .status
        .success());
    let out = run(&[
        "detect", "--connect", &server.addr, "--key", &p("sk.key"),
        "--image", &p("photo.pgm"), "--window-edge", "6", "--stride", "3", "--seed", "4",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout_of(&out).contains("window(s) accepted"));

    // User-side index: three photos, two members each at most.
    assert!(run(&["keygen", "--dim", "3", "--seed", "5", "--out", &p("prk.key")]).status.success());
    assert!(run(&["keygen", "--content", "--seed", "6", "--out", &p("ck.bin")]).status.success());
    for (name, contents) in [("a.bin", "holiday"), ("b.bin", "birthday"), ("c.bin", "hiking")] {
        std::fs::write(dir.path().join(name), contents).unwrap();
    }
    let mut manifest = std::fs::File::create(dir.path().join("photos.tsv")).unwrap();
    writeln!(manifest, "a\t{}\tana,ben", p("a.bin")).unwrap();
    writeln!(manifest, "b\t{}\tana", p("b.bin")).unwrap();
    writeln!(manifest, "c\t{}\t", p("c.bin")).unwrap();
    drop(manifest);

    let out = run(&[
        "index", "--key", &p("prk.key"), "--content-key", &p("ck.bin"),
        "--registry", "ana,ben,cho", "--photos", &p("photos.tsv"),
        "--seed", "7", "--out", &p("index.vidx"), "--connect", &server.addr,
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("index.vidx").exists());

    // Query: only photo "a" contains both ana and ben.
    let out = run(&[
        "query", "--connect", &server.addr, "--key", &p("prk.key"),
        "--content-key", &p("ck.bin"), "--registry", "ana,ben,cho",
        "--targets", "ana,ben", "--seed", "8", "--out-dir", &p("got"), "--json",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let lines: Vec<serde_json::Value> = stdout_of(&out)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.last().unwrap()["matched"], 1);
    assert_eq!(lines[0]["photo_id"], "a");
    assert_eq!(
        std::fs::read(dir.path().join("got/a.bin")).unwrap(),
        b"holiday"
    );

    // Unknown member fails locally with a usage error.
    let out = run(&[
        "query", "--connect", &server.addr, "--key", &p("prk.key"),
        "--content-key", &p("ck.bin"), "--registry", "ana,ben,cho",
        "--targets", "nobody", "--seed", "9",
    ]);
    assert_eq!(out.status.code(), Some(1));
}
