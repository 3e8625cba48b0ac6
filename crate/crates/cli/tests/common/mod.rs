#![allow(dead_code)]

use std::path::{Path, PathBuf};

pub struct Outcome {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

impl Outcome {
    pub fn json(&self) -> serde_json::Value {
        let last = self.stdout.lines().last().unwrap_or_else(|| panic!("no stdout; stderr: {}", self.stderr));
        serde_json::from_str(last).unwrap()
    }
}

pub fn run(args: &[&str]) -> Outcome {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("qcompare").chain(args.iter().copied());
    let code = qcompare_cli::dispatch_with(argv, &mut out, &mut err);
    Outcome {
        code,
        stdout: String::from_utf8(out).unwrap(),
        stderr: String::from_utf8(err).unwrap(),
    }
}

pub fn ok(args: &[&str]) -> serde_json::Value {
    let o = run(args);
    assert_eq!(o.code, 0, "{args:?}\nstderr: {}", o.stderr);
    o.json()
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const QUALITY: [&str; 5] = ["excellent", "good", "acceptable", "poor", "bad"];
const ASPECT: [&str; 7] = ["clarity", "lighting", "color", "noise", "focus", "contrast", "exposure"];
const DETAIL: [&str; 3] = ["slightly", "clearly", "heavily"];
const SUBJECT: [&str; 11] = [
    "a street", "a cat", "a mountain", "a portrait", "a building", "flowers", "a beach", "a car", "food", "a forest", "a crowd",
];

/// Deterministic descriptions with varied wording.
pub fn write_descriptions(dir: &Path, n: usize) -> PathBuf {
    let path = dir.join("descs.jsonl");
    let mut text = String::new();
    for i in 0..n {
        let line = serde_json::json!({
            "image_id": format!("img{i:04}"),
            "uri": format!("https://img.example/{i}.jpg"),
            "text": format!(
                "The photo shows {}. The {} is {}, and the {} is {} degraded. Overall quality is {}.",
                SUBJECT[i % 11],
                ASPECT[i % 7],
                QUALITY[(i / 7) % 5],
                ASPECT[(i / 3) % 7],
                DETAIL[i % 3],
                QUALITY[(i * 3 + 1) % 5]
            ),
        });
        text.push_str(&line.to_string());
        text.push('\n');
    }
    std::fs::write(&path, text).unwrap();
    path
}

pub fn count_lines(path: &Path) -> usize {
    std::fs::read_to_string(path).unwrap().lines().filter(|l| !l.trim().is_empty()).count()
}
