use std::process::Command;

/// Embed the current commit so every emitted file can say which build wrote
/// it. Falls back to "unknown" outside a git checkout (crates.io installs).
fn main() {
    let hash = Command::new("git")
        .args(["rev-parse", "--short=12", "HEAD"])
        .output()
        .ok()
        .filter(|out| out.status.success())
        .map(|out| String::from_utf8_lossy(&out.stdout).trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".to_string());
    println!("cargo:rustc-env=CROPR_GIT_HASH={hash}");
    println!("cargo:rerun-if-changed=../../.git/HEAD");
}
