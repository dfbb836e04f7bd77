//! Shared helpers for the integration tests: running the compiled `cropr`
//! binary and decoding its output formats with independent readers, so that
//! round-trip checks never lean on the writer's own code.

#![allow(dead_code)] // each test target uses its own subset

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

/// Path of the binary under test, resolved by Cargo at compile time.
pub fn cropr_bin() -> &'static str {
    env!("CARGO_BIN_EXE_cropr")
}

/// Run `cropr` with `args` from `dir`, returning the raw process output.
pub fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(cropr_bin()).current_dir(dir).args(args).output().expect("spawn cropr")
}

/// Run and insist on success; returns stdout.
pub fn run_ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "cropr {:?} exited with {:?}\nstdout:\n{}stderr:\n{}",
        args,
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr),
    );
    String::from_utf8(out.stdout).expect("stdout is UTF-8")
}

/// Run and insist on the given exit code; returns stderr.
pub fn run_err(dir: &Path, args: &[&str], want_code: i32) -> String {
    let out = run(dir, args);
    let stderr = String::from_utf8_lossy(&out.stderr).into_owned();
    assert_eq!(
        out.status.code(),
        Some(want_code),
        "cropr {args:?} should exit {want_code}\nstderr:\n{stderr}",
    );
    stderr
}

// ---------------------------------------------------------------------------
// CSV with `# key value` metadata lines.

/// Value of a `# key value` metadata line, if present.
pub fn csv_meta(text: &str, key: &str) -> Option<String> {
    let prefix = format!("# {key} ");
    text.lines().find_map(|l| l.strip_prefix(&prefix).map(str::to_string))
}

/// Column header and data rows of a CSV, metadata lines stripped. Fields
/// are split on bare commas (no field the CLI writes contains one).
pub fn parse_csv(text: &str) -> (Vec<String>, Vec<Vec<String>>) {
    let mut lines = text.lines().filter(|l| !l.starts_with('#') && !l.is_empty());
    let header: Vec<String> =
        lines.next().expect("CSV has a header").split(',').map(str::to_string).collect();
    let rows = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
    (header, rows)
}

/// One named field from a data row.
pub fn csv_field<'a>(header: &[String], row: &'a [String], name: &str) -> &'a str {
    let idx = header.iter().position(|h| h == name).unwrap_or_else(|| {
        panic!("no column {name:?} in {header:?}");
    });
    &row[idx]
}

pub fn parse_f64(s: &str) -> f64 {
    s.parse().unwrap_or_else(|_| panic!("{s:?} is not a float"))
}

/// Every file the CLI writes starts with a self-describing header: the
/// format name, the build version, and the run-config hash.
pub fn assert_self_describing(text: &str, format: &str) {
    let magic = format!("# cropr {format} v1\n");
    assert!(text.starts_with(&magic), "missing magic line {magic:?}:\n{text}");
    let version = csv_meta(text, "version").expect("version line");
    assert!(version.starts_with("cropr v"), "odd version {version:?}");
    assert!(version.contains("-g"), "version {version:?} lacks a git suffix");
    let hash = csv_meta(text, "config").expect("config hash line");
    assert!(
        !hash.is_empty() && hash.chars().all(|c| c.is_ascii_hexdigit()),
        "config hash {hash:?} is not hex"
    );
}

// ---------------------------------------------------------------------------
// PGM (portable graymap, plain "P2" dialect).

pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u32,
    /// Row-major pixels.
    pub pixels: Vec<u32>,
}

/// Strict reader for the plain-PGM dialect the heatmap command writes:
/// `P2`, whole-line `#` comments, then width, height, maxval, and pixels as
/// whitespace-separated integers on lines of at most 70 characters.
pub fn read_pgm(path: &Path) -> Pgm {
    let text = fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    for line in text.lines() {
        assert!(line.len() <= 70, "PGM line over 70 chars: {line:?}");
    }
    let mut tokens = text
        .lines()
        .filter(|l| !l.starts_with('#'))
        .flat_map(str::split_whitespace);
    assert_eq!(tokens.next(), Some("P2"), "not a plain PGM");
    let mut next_num = || -> u32 {
        tokens.next().expect("truncated PGM").parse().expect("PGM fields are integers")
    };
    let width = next_num() as usize;
    let height = next_num() as usize;
    let maxval = next_num();
    let pixels: Vec<u32> = (0..width * height).map(|_| next_num()).collect();
    assert!(tokens.next().is_none(), "trailing PGM data");
    for &p in &pixels {
        assert!(p <= maxval, "pixel {p} exceeds maxval {maxval}");
    }
    Pgm { width, height, maxval, pixels }
}

// ---------------------------------------------------------------------------
// Binary token dumps.

pub struct TokenDump {
    pub images: usize,
    pub m0: usize,
    pub dim: usize,
    pub seed: u64,
    /// `tags[image][patch]`: 0 = kept, b > 0 = pruned after block b.
    pub tags: Vec<Vec<u64>>,
    /// `values[image][patch]`: `dim` floats.
    pub values: Vec<Vec<Vec<f64>>>,
}

/// Independent decoder for the documented dump layout: `header.txt` carries
/// `key value` lines after a magic line, and `tokens.bin` holds, per image
/// and patch in raster order, a little-endian u64 tag followed by `dim`
/// little-endian f64 values.
pub fn read_token_dump(dir: &Path) -> TokenDump {
    let header = fs::read_to_string(dir.join("header.txt")).expect("header.txt");
    let mut lines = header.lines();
    assert_eq!(lines.next(), Some("croprtokens v1"), "dump magic");
    let field = |key: &str| -> String {
        header
            .lines()
            .skip(1)
            .find_map(|l| l.strip_prefix(&format!("{key} ")))
            .unwrap_or_else(|| panic!("header lacks {key:?}"))
            .to_string()
    };
    assert!(field("version").starts_with("cropr v"));
    assert!(field("config").chars().all(|c| c.is_ascii_hexdigit()));
    assert_eq!(field("dtype"), "f64");
    let images: usize = field("images").parse().expect("images count");
    let m0: usize = field("m0").parse().expect("m0");
    let dim: usize = field("dim").parse().expect("dim");
    let seed: u64 = field("seed").parse().expect("seed");

    let bin = fs::read(dir.join("tokens.bin")).expect("tokens.bin");
    let row_bytes = 8 + dim * 8;
    assert_eq!(bin.len(), images * m0 * row_bytes, "dump size mismatch");
    let mut tags = Vec::with_capacity(images);
    let mut values = Vec::with_capacity(images);
    let mut off = 0;
    for _ in 0..images {
        let mut img_tags = Vec::with_capacity(m0);
        let mut img_vals = Vec::with_capacity(m0);
        for _ in 0..m0 {
            let tag = u64::from_le_bytes(bin[off..off + 8].try_into().unwrap());
            off += 8;
            let row: Vec<f64> = (0..dim)
                .map(|i| {
                    let at = off + i * 8;
                    f64::from_le_bytes(bin[at..at + 8].try_into().unwrap())
                })
                .collect();
            off += dim * 8;
            img_tags.push(tag);
            img_vals.push(row);
        }
        tags.push(img_tags);
        values.push(img_vals);
    }
    TokenDump { images, m0, dim, seed, tags, values }
}
