#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

pub fn bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_sbnet"))
}

/// Pids of live processes whose command line mentions `needle`.
pub fn procs_mentioning(needle: &str) -> Vec<u32> {
    let me = std::process::id();
    let mut out = Vec::new();
    let Ok(entries) = fs::read_dir("/proc") else {
        return out;
    };
    for e in entries.flatten() {
        let Some(pid) = e.file_name().to_str().and_then(|s| s.parse::<u32>().ok()) else {
            continue;
        };
        if pid == me {
            continue;
        }
        // Zombies keep their cmdline empty, so they never match.
        let Ok(raw) = fs::read(e.path().join("cmdline")) else {
            continue;
        };
        let cmd = String::from_utf8_lossy(&raw).replace('\0', " ");
        if cmd.contains(needle) {
            out.push(pid);
        }
    }
    out
}

/// Polls until exactly `n` processes mention `needle`, or 2 s pass. A child
/// that is still inside execve shows an empty cmdline even after `spawn`
/// has returned.
pub fn settled_procs(needle: &str, n: usize) -> Vec<u32> {
    let deadline = std::time::Instant::now() + std::time::Duration::from_secs(2);
    loop {
        let found = procs_mentioning(needle);
        if found.len() == n || std::time::Instant::now() >= deadline {
            return found;
        }
        std::thread::sleep(std::time::Duration::from_millis(5));
    }
}

/// Files left anywhere under `dir`.
pub fn leftover_files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let Ok(rd) = fs::read_dir(&d) else { continue };
        for e in rd.flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out
}

/// No process refers to `dir` and no file remains in it.
pub fn assert_clean(dir: &Path) {
    let needle = dir.to_string_lossy().into_owned();
    let procs = procs_mentioning(&needle);
    assert!(procs.is_empty(), "orphan processes {procs:?} under {needle}");
    let files = leftover_files(dir);
    assert!(files.is_empty(), "leftover files {files:?}");
}

pub fn reference_matmul(a: &[Vec<i64>], b: &[Vec<i64>]) -> Vec<Vec<i64>> {
    let n = b.first().map_or(0, Vec::len);
    a.iter()
        .map(|row| {
            (0..n)
                .map(|j| row.iter().zip(b).map(|(x, brow)| x * brow[j]).sum())
                .collect()
        })
        .collect()
}
