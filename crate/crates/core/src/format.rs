//! JSON Lines dataset files and their sidecar manifests.
//!
//! One transition per line:
//! `{"ep":0,"t":0,"s":3,"a":1,"r":0.0,"sn":4,"d":false}`, grouped by episode
//! with consecutive step indices starting at zero. The manifest for
//! `name.jsonl` lives next to it as `name.manifest.json`.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Dataset, DatasetError, Manifest, Trajectory, Transition};

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("manifest {path}: {message}")]
    Manifest { path: String, message: String },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

impl FormatError {
    fn line(line: usize, message: impl Into<String>) -> Self {
        Self::Line { line, message: message.into() }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    ep: u64,
    t: u32,
    s: u64,
    a: u32,
    r: f64,
    sn: u64,
    d: bool,
}

/// Serializes every transition in episode order.
pub fn write_jsonl<W: Write>(ds: &Dataset, mut w: W) -> io::Result<()> {
    for traj in &ds.trajectories {
        for (t, tr) in traj.transitions.iter().enumerate() {
            let rec = Record {
                ep: traj.episode_id,
                t: t as u32,
                s: tr.s,
                a: tr.a,
                r: tr.r,
                sn: tr.s_next,
                d: tr.terminal,
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
    }
    Ok(())
}

pub fn to_jsonl_string(ds: &Dataset) -> String {
    let mut buf = Vec::new();
    write_jsonl(ds, &mut buf).expect("writing to a Vec cannot fail");
    String::from_utf8(buf).expect("serde_json emits utf-8")
}

/// Parses a dataset. Without a manifest, one is inferred from the data
/// (state and action ranges from the largest ids seen).
pub fn read_jsonl<R: BufRead>(reader: R, manifest: Option<Manifest>) -> Result<Dataset, FormatError> {
    let mut trajectories: Vec<Trajectory> = Vec::new();
    let mut finished = std::collections::HashSet::new();
    let mut max_state = 0u64;
    let mut max_action = 0u32;
    let mut lines = reader.lines().enumerate().peekable();
    while let Some((idx, line)) = lines.next() {
        let lineno = idx + 1;
        let line = line.map_err(|e| FormatError::line(lineno, e.to_string()))?;
        if line.is_empty() {
            if lines.peek().is_none() {
                break;
            }
            return Err(FormatError::line(lineno, "blank line"));
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| FormatError::line(lineno, e.to_string()))?;
        if !rec.r.is_finite() {
            return Err(FormatError::line(lineno, "reward is not finite"));
        }
        let continues = trajectories.last().is_some_and(|t| t.episode_id == rec.ep);
        if continues {
            let traj = trajectories.last_mut().expect("checked above");
            let prev = traj.transitions.last().expect("trajectories are never empty");
            if rec.t as usize != traj.transitions.len() {
                return Err(FormatError::line(
                    lineno,
                    format!("episode {} expects step {}, found {}", rec.ep, traj.transitions.len(), rec.t),
                ));
            }
            if prev.terminal {
                return Err(FormatError::line(lineno, format!("episode {} continues after a terminal step", rec.ep)));
            }
            if prev.s_next != rec.s {
                return Err(FormatError::line(
                    lineno,
                    format!("state {} does not continue from previous next-state {}", rec.s, prev.s_next),
                ));
            }
        } else {
            if let Some(last) = trajectories.last() {
                finished.insert(last.episode_id);
            }
            if finished.contains(&rec.ep) {
                return Err(FormatError::line(lineno, format!("episode {} is not contiguous", rec.ep)));
            }
            if rec.t != 0 {
                return Err(FormatError::line(lineno, format!("episode {} starts at step {}", rec.ep, rec.t)));
            }
            trajectories.push(Trajectory::new(rec.ep, Vec::new()));
        }
        if let Some(m) = &manifest {
            if rec.s >= m.n_states || rec.sn >= m.n_states || rec.a >= m.n_actions {
                return Err(FormatError::line(lineno, "state or action id outside manifest range"));
            }
        }
        max_state = max_state.max(rec.s).max(rec.sn);
        max_action = max_action.max(rec.a);
        let traj = trajectories.last_mut().expect("pushed above");
        traj.transitions.push(Transition::new(rec.s, rec.a, rec.r, rec.sn, rec.d));
    }
    let n: u64 = trajectories.iter().map(|t| t.len() as u64).sum();
    let manifest = manifest.unwrap_or_else(|| Manifest {
        env: "unknown".into(),
        scheme: "unknown".into(),
        seed: 0,
        n,
        n_states: if n == 0 { 0 } else { max_state + 1 },
        n_actions: if n == 0 { 0 } else { max_action + 1 },
        gamma: 1.0,
    });
    Ok(Dataset::new(trajectories, manifest)?)
}

/// `dir/name.jsonl` -> `dir/name.manifest.json`.
pub fn manifest_path(path: &Path) -> PathBuf {
    path.with_extension("manifest.json")
}

pub fn read_manifest(path: &Path) -> Result<Manifest, FormatError> {
    let text = std::fs::read_to_string(path).map_err(|source| FormatError::Io { path: path.display().to_string(), source })?;
    serde_json::from_str(&text).map_err(|e| FormatError::Manifest { path: path.display().to_string(), message: e.to_string() })
}

/// Loads a dataset file together with its manifest when one exists.
pub fn load(path: &Path) -> Result<Dataset, FormatError> {
    let mpath = manifest_path(path);
    let manifest = if mpath.exists() { Some(read_manifest(&mpath)?) } else { None };
    let file = File::open(path).map_err(|source| FormatError::Io { path: path.display().to_string(), source })?;
    read_jsonl(BufReader::new(file), manifest)
}

/// Writes the dataset and its sidecar manifest.
pub fn save(ds: &Dataset, path: &Path) -> Result<(), FormatError> {
    let io_err = |p: &Path| {
        let p = p.display().to_string();
        move |source| FormatError::Io { path: p.clone(), source }
    };
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    write_jsonl(ds, &mut w).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))?;
    let mpath = manifest_path(path);
    let text = serde_json::to_string(&ds.manifest).expect("manifest serializes");
    std::fs::write(&mpath, text + "\n").map_err(io_err(&mpath))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = concat!(
        "{\"ep\":0,\"t\":0,\"s\":0,\"a\":1,\"r\":0.0,\"sn\":1,\"d\":false}\n",
        "{\"ep\":0,\"t\":1,\"s\":1,\"a\":1,\"r\":1.0,\"sn\":2,\"d\":true}\n",
        "{\"ep\":7,\"t\":0,\"s\":0,\"a\":0,\"r\":-0.5,\"sn\":0,\"d\":false}\n",
    );

    #[test]
    fn parses_and_reserializes_identically() {
        let ds = read_jsonl(GOOD.as_bytes(), None).unwrap();
        assert_eq!(ds.trajectories.len(), 2);
        assert_eq!(ds.manifest.n, 3);
        assert_eq!(ds.manifest.n_states, 3);
        assert_eq!(ds.manifest.n_actions, 2);
        assert_eq!(to_jsonl_string(&ds), GOOD);
    }

    fn line_of(err: FormatError) -> usize {
        match err {
            FormatError::Line { line, .. } => line,
            other => panic!("expected line error, got {other}"),
        }
    }

    #[test]
    fn malformed_lines_report_their_number() {
        let cases = [
            (GOOD.replace("\"a\":1,\"r\":1.0", "\"a\":1,\"r\":\"x\""), 2),
            (GOOD.replace("\"t\":1", "\"t\":2"), 2),
            (GOOD.replace("\"s\":1,\"a\":1", "\"s\":5,\"a\":1"), 2),
            (format!("{GOOD}{{\"ep\":0,\"t\":0,\"s\":0,\"a\":0,\"r\":0,\"sn\":0,\"d\":false}}\n"), 4),
            (GOOD.replacen("\n", "\n\n", 1), 2),
            (format!("{GOOD}not json\n"), 4),
            (GOOD.replace(",\"d\":true}", ",\"d\":true,\"x\":1}"), 2),
        ];
        for (text, line) in cases {
            assert_eq!(line_of(read_jsonl(text.as_bytes(), None).unwrap_err()), line, "{text}");
        }
    }

    #[test]
    fn continuation_after_terminal_rejected() {
        let text = concat!(
            "{\"ep\":0,\"t\":0,\"s\":0,\"a\":0,\"r\":0.0,\"sn\":1,\"d\":true}\n",
            "{\"ep\":0,\"t\":1,\"s\":1,\"a\":0,\"r\":0.0,\"sn\":1,\"d\":false}\n",
        );
        assert_eq!(line_of(read_jsonl(text.as_bytes(), None).unwrap_err()), 2);
    }

    #[test]
    fn manifest_ranges_checked_per_line() {
        let m = Manifest {
            env: "e".into(),
            scheme: "s".into(),
            seed: 1,
            n: 3,
            n_states: 2,
            n_actions: 2,
            gamma: 1.0,
        };
        assert_eq!(line_of(read_jsonl(GOOD.as_bytes(), Some(m)).unwrap_err()), 2);
    }

    #[test]
    fn save_and_load_with_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run_1.jsonl");
        let mut ds = read_jsonl(GOOD.as_bytes(), None).unwrap();
        ds.manifest.env = "chain3".into();
        ds.manifest.seed = 9;
        save(&ds, &path).unwrap();
        assert!(dir.path().join("run_1.manifest.json").exists());
        let back = load(&path).unwrap();
        assert_eq!(back, ds);
    }

    proptest::proptest! {
        #[test]
        fn rewards_survive_a_round_trip(rewards in proptest::collection::vec(proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO, 1..40)) {
            let n = rewards.len();
            let steps = rewards.iter().enumerate().map(|(i, &r)| Transition::new(i as u64, 0, r, i as u64 + 1, i + 1 == n)).collect();
            let ds = Dataset::from_trajectories(vec![Trajectory::new(0, steps)], Manifest { env: "p".into(), scheme: "p".into(), seed: 0, n: 0, n_states: n as u64 + 1, n_actions: 1, gamma: 1.0 }).unwrap();
            let text = to_jsonl_string(&ds);
            let back = read_jsonl(text.as_bytes(), None).unwrap();
            let got: Vec<u64> = back.transitions().map(|t| t.r.to_bits()).collect();
            let want: Vec<u64> = rewards.iter().map(|r| r.to_bits()).collect();
            proptest::prop_assert_eq!(got, want);
            proptest::prop_assert_eq!(to_jsonl_string(&back), text);
        }
    }
}
