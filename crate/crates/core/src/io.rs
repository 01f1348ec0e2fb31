//! CSV and JSON artifacts. Every file carries the resolved configuration and
//! a schema version; the only run-dependent bytes are on the `generated_at`
//! line.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::{json, Value};

use crate::engine::MultivaluedSolution;
use crate::error::{Error, Result};
use crate::oracle::TreeSolution;

pub const SCHEMA_VERSION: u32 = 1;

/// Key of the single line allowed to differ between identical runs.
pub const TIMESTAMP_KEY: &str = "generated_at";

pub fn timestamp() -> String {
    let s = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    format!("unix:{s}")
}

/// Writes through a sibling temporary file so a failed run leaves nothing
/// behind under `path`.
pub fn write_atomic<F>(path: &Path, body: F) -> Result<()>
where
    F: FnOnce(&mut dyn Write) -> Result<()>,
{
    let tmp = tmp_path(path);
    let res = (|| {
        let mut w = BufWriter::new(fs::File::create(&tmp)?);
        body(&mut w)?;
        w.flush()?;
        Ok(())
    })();
    match res {
        Ok(()) => {
            fs::rename(&tmp, path)?;
            Ok(())
        }
        Err(e) => {
            let _ = fs::remove_file(&tmp);
            Err(e)
        }
    }
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".partial");
    path.with_file_name(name)
}

/// `{schema_version, generated_at, command, config, result}` with the
/// timestamp on its own line.
pub fn json_document<T: Serialize>(command: &str, echo: &[String], result: &T) -> Result<String> {
    let doc = json!({
        "schema_version": SCHEMA_VERSION,
        TIMESTAMP_KEY: timestamp(),
        "command": command,
        "config": echo,
        "result": serde_json::to_value(result)?,
    });
    let mut s = serde_json::to_string_pretty(&doc)?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(
    path: &Path,
    command: &str,
    echo: &[String],
    result: &T,
) -> Result<()> {
    let text = json_document(command, echo, result)?;
    write_atomic(path, |w| Ok(w.write_all(text.as_bytes())?))
}

pub fn read_json(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

fn write_header(w: &mut dyn Write, echo: &[String]) -> Result<()> {
    writeln!(w, "# schema_version = {SCHEMA_VERSION}")?;
    writeln!(w, "# {TIMESTAMP_KEY} = {}", timestamp())?;
    for l in echo {
        writeln!(w, "# {l}")?;
    }
    Ok(())
}

/// One row per `(path, step)` for the first `max_paths` paths.
/// Multidimensional states get `Y0, Y1, ...`; `Z` is empty at the last node.
pub fn write_solution_csv(
    path: &Path,
    echo: &[String],
    sol: &MultivaluedSolution,
    max_paths: usize,
) -> Result<()> {
    write_atomic(path, |w| {
        write_header(w, echo)?;
        let (m, k) = (sol.m, sol.k);
        let cols = |name: &str, n: usize| -> Vec<String> {
            if n == 1 {
                vec![name.to_string()]
            } else {
                (0..n).map(|j| format!("{name}{j}")).collect()
            }
        };
        let mut head = vec!["path".to_string(), "step".to_string()];
        head.extend(cols("Y", m));
        head.extend(cols("Z", m * k));
        head.extend(cols("K", m));
        writeln!(w, "{}", head.join(","))?;
        for p in 0..sol.paths.min(max_paths) {
            for i in 0..=sol.steps {
                let mut row = vec![p.to_string(), i.to_string()];
                row.extend(sol.y_at(p, i).iter().map(|v| v.to_string()));
                if i < sol.steps {
                    row.extend(sol.z_at(p, i).iter().map(|v| v.to_string()));
                } else {
                    row.extend(std::iter::repeat_n(String::new(), m * k));
                }
                row.extend(sol.k_at(p, i).iter().map(|v| v.to_string()));
                writeln!(w, "{}", row.join(","))?;
            }
        }
        Ok(())
    })
}

/// Tree oracle values, one row per `(level, node)`.
pub fn write_tree_csv(path: &Path, echo: &[String], tree: &TreeSolution) -> Result<()> {
    write_atomic(path, |w| {
        write_header(w, echo)?;
        tree.write_csv(&mut *w)
    })
}

/// Removes the timestamp line so two artifacts can be compared bytewise.
pub fn strip_timestamp(text: &str) -> String {
    text.lines()
        .filter(|l| !l.contains(TIMESTAMP_KEY))
        .map(|l| format!("{l}\n"))
        .collect()
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::from)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_has_schema_and_isolated_timestamp() {
        let s = json_document("solve", &["a.b = 1".to_string()], &vec![1.5, 2.0]).unwrap();
        let v: Value = serde_json::from_str(&s).unwrap();
        assert_eq!(v["schema_version"], 1);
        assert_eq!(v["config"][0], "a.b = 1");
        assert_eq!(s.lines().filter(|l| l.contains(TIMESTAMP_KEY)).count(), 1);
        assert!(!strip_timestamp(&s).contains("unix:"));
    }

    #[test]
    fn failed_write_leaves_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.json");
        let r = write_atomic(&p, |w| {
            w.write_all(b"half")?;
            Err(Error::Unsupported("boom".into()))
        });
        assert!(r.is_err());
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
    }
}
