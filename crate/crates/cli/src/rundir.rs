//! Run directories: `<output_dir>/<command>-<hash8>-seed<s>`, with `-v2`,
//! `-v3`, ... appended instead of overwriting an existing run.

use std::path::{Path, PathBuf};

use anyhow::Context as _;

use crate::config::RunConfig;

pub fn create(root: &Path, command: &str, cfg: &RunConfig, extra: &str, seed: Option<u64>) -> anyhow::Result<PathBuf> {
    let hash = cfg.hash_with(extra);
    let mut stem = format!("{command}-{}", &hash[..8]);
    if let Some(s) = seed {
        stem.push_str(&format!("-seed{s}"));
    }
    std::fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
    let mut dir = root.join(&stem);
    let mut version = 1;
    loop {
        match std::fs::create_dir(&dir) {
            Ok(()) => break,
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                version += 1;
                dir = root.join(format!("{stem}-v{version}"));
            }
            Err(e) => return Err(e).with_context(|| format!("creating {}", dir.display())),
        }
    }
    std::fs::write(dir.join("config.toml"), cfg.resolved_toml())?;
    let invocation = serde_json::json!({ "command": command, "seed": seed, "args": extra, "sha256": hash });
    std::fs::write(dir.join("config.sha256"), format!("{hash}\n"))?;
    std::fs::write(dir.join("invocation.json"), serde_json::to_string_pretty(&invocation)?)?;
    log::info!("run directory {}", dir.display());
    println!("{}", dir.display());
    Ok(dir)
}
