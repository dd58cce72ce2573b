//! HTTP download of dataset text files listed in a JSON manifest:
//!
//! ```json
//! { "files": [ { "url": "http://host/shapes_6dof/events.txt",
//!                "path": "shapes_6dof/events.txt",
//!                "size": 123456,
//!                "sha256": "9f86d0..." } ] }
//! ```
//!
//! `size` and `sha256` are optional. A body that disagrees with the
//! server's Content-Length, the manifest size or the digest is rejected and
//! nothing is left at the target path.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Component, Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub files: Vec<ManifestFile>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestFile {
    pub url: String,
    /// Target path relative to the output directory.
    pub path: PathBuf,
    #[serde(default)]
    pub size: Option<u64>,
    #[serde(default)]
    pub sha256: Option<String>,
}

fn check_relative(path: &Path) -> Result<()> {
    let ok = path.components().all(|c| matches!(c, Component::Normal(_))) && !path.as_os_str().is_empty();
    if !ok {
        bail!("manifest path {} must be relative without `..`", path.display());
    }
    Ok(())
}

/// Downloads every file of the manifest at `manifest_path` into `out`.
/// Returns the written paths.
pub fn fetch_manifest(manifest_path: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let text = fs::read_to_string(manifest_path).with_context(|| format!("reading {}", manifest_path.display()))?;
    let manifest: Manifest =
        serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", manifest_path.display()))?;
    for f in &manifest.files {
        check_relative(&f.path)?;
    }
    manifest
        .files
        .iter()
        .map(|f| {
            let target = out.join(&f.path);
            download(f, &target).with_context(|| format!("fetching {}", f.url))?;
            Ok(target)
        })
        .collect()
}

fn download(file: &ManifestFile, target: &Path) -> Result<()> {
    let parent = target.parent().expect("joined path has a parent");
    fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    let response = ureq::get(&file.url).call()?;
    let announced = response
        .headers()
        .get("content-length")
        .map(|v| -> Result<u64> { Ok(v.to_str()?.trim().parse()?) })
        .transpose()
        .context("bad Content-Length header")?;
    if let (Some(a), Some(s)) = (announced, file.size) {
        if a != s {
            bail!("server announces {a} bytes, manifest expects {s}");
        }
    }

    // removed on drop unless persisted
    let mut tmp = io::BufWriter::new(tempfile::NamedTempFile::new_in(parent)?);
    let mut reader = response.into_body().into_reader();
    let mut hasher = Sha256::new();
    let mut received: u64 = 0;
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = match reader.read(&mut buf) {
            Ok(0) => break,
            Ok(n) => n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(e).context("reading response body"),
        };
        hasher.update(&buf[..n]);
        tmp.write_all(&buf[..n])?;
        received += n as u64;
    }
    tmp.flush()?;

    for (what, expected) in [("Content-Length", announced), ("manifest size", file.size)] {
        if let Some(e) = expected {
            if e != received {
                bail!("received {received} bytes, {what} says {e}");
            }
        }
    }
    if let Some(want) = &file.sha256 {
        let got = hex::encode(hasher.finalize());
        if !got.eq_ignore_ascii_case(want.trim()) {
            bail!("sha256 mismatch: expected {want}, got {got}");
        }
    }
    tmp.into_inner()?
        .persist(target)
        .with_context(|| format!("moving download to {}", target.display()))?;
    log::info!("{} -> {} ({received} bytes)", file.url, target.display());
    Ok(())
}
