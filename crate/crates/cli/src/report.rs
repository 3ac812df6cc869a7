//! `report`: mean and standard error of test metrics across seeds.
//!
//! Runs are grouped by directory name with the `-seed<s>` and `-v<n>`
//! suffixes removed; curve files are further grouped by their x value.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use anyhow::Context as _;
use popt::decode::mean_and_se;
use walkdir::WalkDir;

use crate::CliError;

const METRICS: [&str; 2] = ["roc_auc", "balanced_accuracy"];

/// Run directory name without seed and version suffixes.
pub fn group_name(dir: &str) -> String {
    let mut parts: Vec<&str> = dir.split('-').collect();
    while let Some(last) = parts.last() {
        let numbered = |prefix: &str| {
            last.strip_prefix(prefix)
                .is_some_and(|n| !n.is_empty() && n.chars().all(|c| c.is_ascii_digit()))
        };
        if numbered("seed") || numbered("v") {
            parts.pop();
        } else {
            break;
        }
    }
    parts.join("-")
}

type Key = (String, String, &'static str);

fn collect(path: &Path, group: &str, curve: bool, out: &mut BTreeMap<Key, Vec<f64>>) -> anyhow::Result<()> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let headers = r.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let x_col = if curve { Some(0) } else { None };
    for row in r.records() {
        let row = row?;
        let x = x_col.map(|i| row[i].to_string()).unwrap_or_default();
        for m in METRICS {
            let i = col(m).ok_or_else(|| CliError::Schema(format!("{} has no `{m}` column", path.display())))?;
            let v: f64 = row[i].parse().with_context(|| format!("{m} in {}", path.display()))?;
            out.entry((group.to_string(), x.clone(), m)).or_default().push(v);
        }
    }
    Ok(())
}

pub fn report(dir: &Path, out: Option<&Path>) -> anyhow::Result<()> {
    if !dir.is_dir() {
        return Err(CliError::MissingFile(dir.to_path_buf()).into());
    }
    let mut cells: BTreeMap<Key, Vec<f64>> = BTreeMap::new();
    let mut entries: Vec<_> = WalkDir::new(dir).into_iter().collect::<Result<_, _>>()?;
    entries.sort_by(|a, b| a.path().cmp(b.path()));
    for e in entries {
        let name = e.file_name().to_string_lossy();
        let curve = name == "curve.csv";
        if !(curve || name == "report.csv") {
            continue;
        }
        let parent = e.path().parent().and_then(|p| p.file_name()).map(|n| n.to_string_lossy().into_owned());
        let group = group_name(&parent.unwrap_or_default());
        collect(e.path(), &group, curve, &mut cells)?;
    }
    let target = out.map(Path::to_path_buf).unwrap_or_else(|| dir.join("summary.csv"));
    let mut f = std::fs::File::create(&target).with_context(|| format!("creating {}", target.display()))?;
    writeln!(f, "group,x,metric,n,mean,se")?;
    for ((group, x, metric), values) in &cells {
        let (mean, se) = mean_and_se(values);
        writeln!(f, "{group},{x},{metric},{},{mean},{se}", values.len())?;
        println!("{group:<32} {x:>8} {metric:<18} n={:<3} {mean:.4} ± {se:.4}", values.len());
    }
    log::info!("wrote {}", target.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::group_name;

    #[test]
    fn strips_seed_and_version() {
        assert_eq!(group_name("finetune-0123abcd-seed3"), "finetune-0123abcd");
        assert_eq!(group_name("finetune-0123abcd-seed3-v2"), "finetune-0123abcd");
        assert_eq!(group_name("baseline-deep-nn-0123abcd-seed10"), "baseline-deep-nn-0123abcd");
        assert_eq!(group_name("sweep-0123abcd-v4"), "sweep-0123abcd");
        assert_eq!(group_name("sweep-0123abcd"), "sweep-0123abcd");
    }
}
