//! Plain-text run configuration: `section.key = value` lines, `#` comments.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::convex::{ConvexKind, ConvexSpec};
use crate::engine::{MollifyMode, PenaltyMode, Problem, SolverOpts};
use crate::error::{Error, Result};
use crate::generator::{DriverKind, GeneratorSpec};
use crate::sim::{Clock, GridConfig, Terminal};

/// Parses a float, accepting `inf`, `+inf` and `-inf`.
pub fn parse_f64(s: &str) -> Result<f64> {
    let s = s.trim();
    match s {
        "inf" | "+inf" => Ok(f64::INFINITY),
        "-inf" => Ok(f64::NEG_INFINITY),
        _ => s
            .parse::<f64>()
            .map_err(|_| Error::InvalidSpec(format!("not a number: `{s}`"))),
    }
}

/// Splits `name(a, b, ...)` into its name and raw argument strings.
pub fn split_call_raw(s: &str) -> Result<(String, Vec<String>)> {
    let s = s.trim();
    match s.find('(') {
        None => Ok((s.to_ascii_lowercase(), Vec::new())),
        Some(i) => {
            let body = s[i + 1..]
                .strip_suffix(')')
                .ok_or_else(|| Error::InvalidSpec(format!("unbalanced parentheses in `{s}`")))?;
            let args = if body.trim().is_empty() {
                Vec::new()
            } else {
                body.split(',').map(|a| a.trim().to_string()).collect()
            };
            Ok((s[..i].trim().to_ascii_lowercase(), args))
        }
    }
}

/// Splits `name(a, b, ...)` with numeric arguments.
pub fn split_call(s: &str) -> Result<(String, Vec<f64>)> {
    let (name, args) = split_call_raw(s)?;
    let nums = args.iter().map(|a| parse_f64(a)).collect::<Result<_>>()?;
    Ok((name, nums))
}

/// Every recognised key with its default, in echo order.
pub const KEYS: &[(&str, &str)] = &[
    ("problem.phi", "zero"),
    ("problem.psi", "zero"),
    ("problem.f", "zero"),
    ("problem.g", "zero"),
    ("problem.terminal", "constant(1)"),
    ("problem.clock", "none"),
    ("problem.horizon", "1"),
    ("problem.exit", "none"),
    ("problem.state_dim", "1"),
    ("problem.brownian_dim", "1"),
    ("numerics.steps", "100"),
    ("numerics.paths", "10000"),
    ("numerics.seed", "1"),
    ("numerics.eps_schedule", "0.4,0.2,0.1,0.05"),
    ("numerics.tol", "0"),
    ("numerics.degree", "3"),
    ("numerics.quad_nodes", "64"),
    ("numerics.penalty", "explicit"),
    ("numerics.mollify", "auto"),
    ("numerics.mollifier_eps", "auto"),
    ("numerics.gate_eps", "auto"),
    ("numerics.p", "2"),
    ("numerics.lambda", "0.5"),
    ("checks.variational", "true"),
    ("checks.p_list", "1.5,2"),
    ("checks.deltas", "0.01,0.5"),
    ("checks.terminal", "true"),
    ("checks.apriori", "true"),
    ("checks.subdiff", "true"),
    ("checks.ito", "true"),
    ("oracle.tree_steps", "512"),
    ("output.dir", "out"),
    ("output.csv_paths", "100"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct ChecksConfig {
    pub variational: bool,
    pub p_list: Vec<f64>,
    pub deltas: Vec<f64>,
    pub terminal: bool,
    pub apriori: bool,
    pub subdiff: bool,
    pub ito: bool,
}

/// Parsed run configuration. `raw` holds the resolved `key = value` table.
#[derive(Clone, Debug)]
pub struct RunConfig {
    raw: BTreeMap<&'static str, String>,
    pub phi: ConvexSpec,
    pub psi: ConvexSpec,
    pub f: DriverKind,
    pub g: DriverKind,
    pub terminal: Terminal,
    pub grid: GridConfig,
    pub eps_schedule: Vec<f64>,
    pub tol: f64,
    pub opts: SolverOpts,
    pub p: f64,
    pub lambda: f64,
    pub checks: ChecksConfig,
    pub tree_steps: usize,
    pub out_dir: String,
    /// Paths written to the solution CSV.
    pub csv_paths: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::parse("").expect("defaults parse")
    }
}

fn bool_value(s: &str) -> Result<bool> {
    match s.trim() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        other => Err(Error::InvalidSpec(format!("not a boolean: `{other}`"))),
    }
}

fn list_value(s: &str) -> Result<Vec<f64>> {
    s.split(',').map(parse_f64).collect()
}

fn usize_value(s: &str) -> Result<usize> {
    s.trim()
        .parse()
        .map_err(|_| Error::InvalidSpec(format!("not a nonnegative integer: `{}`", s.trim())))
}

fn auto_or_f64(s: &str) -> Result<Option<f64>> {
    if s.trim() == "auto" {
        Ok(None)
    } else {
        parse_f64(s).map(Some)
    }
}

/// `kind` repeated over `dim` components, or `product[k1;k2;...]`.
pub fn parse_convex(s: &str, dim: usize) -> Result<ConvexSpec> {
    let s = s.trim();
    if let Some(body) = s.strip_prefix("product[").and_then(|b| b.strip_suffix(']')) {
        let kinds = body
            .split(';')
            .map(str::parse)
            .collect::<Result<Vec<ConvexKind>>>()?;
        if kinds.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: kinds.len(),
            });
        }
        return ConvexSpec::product(kinds);
    }
    let kind: ConvexKind = s.parse()?;
    ConvexSpec::product(vec![kind; dim])
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    /// Parses `section.key = value` lines. Unknown keys, duplicates and bad
    /// values are reported with their line number.
    pub fn parse(text: &str) -> Result<Self> {
        let mut raw: BTreeMap<&'static str, String> =
            KEYS.iter().map(|(k, v)| (*k, v.to_string())).collect();
        let mut lines: BTreeMap<&'static str, usize> = BTreeMap::new();
        let mut section = String::new();
        for (no, line) in text.lines().enumerate() {
            let no = no + 1;
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(s) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                section = s.trim().to_string();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                line: no,
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            let key = key.trim();
            let full = if key.contains('.') || section.is_empty() {
                key.to_string()
            } else {
                format!("{section}.{key}")
            };
            let Some(&(k, _)) = KEYS.iter().find(|(k, _)| *k == full) else {
                return Err(Error::Config {
                    line: no,
                    msg: format!("unknown key `{full}`"),
                });
            };
            if lines.insert(k, no).is_some() {
                return Err(Error::Config {
                    line: no,
                    msg: format!("duplicate key `{full}`"),
                });
            }
            raw.insert(k, value.trim().to_string());
        }
        Self::resolve(raw, &lines)
    }

    fn resolve(
        raw: BTreeMap<&'static str, String>,
        lines: &BTreeMap<&'static str, usize>,
    ) -> Result<Self> {
        let at = |k: &str| lines.get(k).copied().unwrap_or(0);
        let wrap = |k: &'static str, e: Error| Error::Config {
            line: at(k),
            msg: format!("{k}: {e}"),
        };
        let get = |k: &'static str| raw[k].as_str();

        macro_rules! field {
            ($key:literal, $f:expr) => {
                $f(get($key)).map_err(|e| wrap($key, e))?
            };
        }

        let m = field!("problem.state_dim", usize_value);
        let k = field!("problem.brownian_dim", usize_value);
        if m == 0 || k == 0 {
            return Err(wrap(
                "problem.state_dim",
                Error::InvalidSpec("dimensions must be positive".into()),
            ));
        }
        let phi = field!("problem.phi", |s| parse_convex(s, m));
        let psi = field!("problem.psi", |s| parse_convex(s, m));
        let f: DriverKind = field!("problem.f", str::parse);
        let g: DriverKind = field!("problem.g", str::parse);
        GeneratorSpec::new(f.clone(), g.clone(), m, k).map_err(|e| wrap("problem.f", e))?;
        let terminal: Terminal = field!("problem.terminal", str::parse);
        let clock: Clock = field!("problem.clock", str::parse);
        let exit = field!("problem.exit", |s: &str| -> Result<Option<(f64, f64)>> {
            if s.trim() == "none" {
                return Ok(None);
            }
            match list_value(s)?.as_slice() {
                [lo, hi] => Ok(Some((*lo, *hi))),
                _ => Err(Error::InvalidSpec("exit takes `lo,hi`".into())),
            }
        });
        let grid = GridConfig {
            horizon: field!("problem.horizon", parse_f64),
            steps: field!("numerics.steps", usize_value),
            paths: field!("numerics.paths", usize_value),
            brownian_dim: k,
            state_dim: m,
            seed: field!("numerics.seed", |s: &str| s.trim().parse::<u64>().map_err(
                |_| Error::InvalidSpec(format!("not a seed: `{}`", s.trim()))
            )),
            clock,
            exit,
            ..GridConfig::default()
        };
        grid.validate().map_err(|e| wrap("numerics.paths", e))?;

        let penalty = field!("numerics.penalty", |s: &str| match s.trim() {
            "explicit" => Ok(PenaltyMode::Explicit),
            "implicit" => Ok(PenaltyMode::Implicit),
            o => Err(Error::InvalidSpec(format!(
                "penalty must be explicit or implicit, got `{o}`"
            ))),
        });
        let mollify = field!("numerics.mollify", |s: &str| match s.trim() {
            "auto" => Ok(MollifyMode::Auto),
            "always" => Ok(MollifyMode::Always),
            "never" => Ok(MollifyMode::Never),
            o => Err(Error::InvalidSpec(format!(
                "mollify must be auto, always or never, got `{o}`"
            ))),
        });
        let opts = SolverOpts {
            degree: field!("numerics.degree", usize_value),
            penalty,
            mollify,
            quad_nodes: field!("numerics.quad_nodes", usize_value),
            mollifier_eps: field!("numerics.mollifier_eps", auto_or_f64),
            gate_eps: field!("numerics.gate_eps", auto_or_f64),
            ..SolverOpts::default()
        };
        let eps_schedule = field!("numerics.eps_schedule", list_value);
        if eps_schedule.is_empty() || eps_schedule.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
            return Err(wrap(
                "numerics.eps_schedule",
                Error::InvalidSpec("entries must be positive".into()),
            ));
        }
        let p = field!("numerics.p", parse_f64);
        let lambda = field!("numerics.lambda", parse_f64);
        if !(p > 1.0) {
            return Err(wrap(
                "numerics.p",
                Error::InvalidSpec(format!("p must exceed 1, got {p}")),
            ));
        }
        if !(lambda > 0.0 && lambda < 1.0) {
            return Err(wrap(
                "numerics.lambda",
                Error::InvalidSpec(format!("lambda must lie in (0,1), got {lambda}")),
            ));
        }
        let checks = ChecksConfig {
            variational: field!("checks.variational", bool_value),
            p_list: field!("checks.p_list", list_value),
            deltas: field!("checks.deltas", list_value),
            terminal: field!("checks.terminal", bool_value),
            apriori: field!("checks.apriori", bool_value),
            subdiff: field!("checks.subdiff", bool_value),
            ito: field!("checks.ito", bool_value),
        };
        if checks.p_list.iter().any(|p| !(*p > 1.0)) {
            return Err(wrap(
                "checks.p_list",
                Error::InvalidSpec("every p must exceed 1".into()),
            ));
        }
        Ok(Self {
            tol: field!("numerics.tol", parse_f64),
            tree_steps: field!("oracle.tree_steps", usize_value),
            out_dir: get("output.dir").to_string(),
            csv_paths: field!("output.csv_paths", usize_value),
            phi,
            psi,
            f,
            g,
            terminal,
            grid,
            eps_schedule,
            opts,
            p,
            lambda,
            checks,
            raw,
        })
    }

    /// Overrides one key as if it appeared in the file.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let Some(&(k, _)) = KEYS.iter().find(|(k, _)| *k == key) else {
            return Err(Error::Config {
                line: 0,
                msg: format!("unknown key `{key}`"),
            });
        };
        let mut raw = self.raw.clone();
        raw.insert(k, value.trim().to_string());
        *self = Self::resolve(raw, &BTreeMap::new())?;
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.raw.get(key).map(String::as_str)
    }

    /// The resolved table, one `key = value` per line in [`KEYS`] order.
    pub fn echo(&self) -> Vec<String> {
        KEYS.iter()
            .map(|(k, _)| format!("{k} = {}", self.raw[k]))
            .collect()
    }

    pub fn echo_text(&self) -> String {
        let mut s = String::new();
        for l in self.echo() {
            let _ = writeln!(s, "{l}");
        }
        s
    }

    pub fn generator(&self) -> GeneratorSpec {
        GeneratorSpec::new(
            self.f.clone(),
            self.g.clone(),
            self.grid.state_dim,
            self.grid.brownian_dim,
        )
        .expect("validated at parse time")
    }

    pub fn problem(&self) -> Result<Problem> {
        Problem::new(
            self.generator(),
            self.phi.clone(),
            self.psi.clone(),
            self.terminal,
        )
    }

    pub fn solver_opts(&self, exec: crate::exec::Exec) -> SolverOpts {
        SolverOpts {
            exec,
            ..self.opts.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_echo() {
        let c = RunConfig::default();
        let again = RunConfig::parse(&c.echo_text()).unwrap();
        assert_eq!(c.echo(), again.echo());
        assert_eq!(c.grid.steps, 100);
        assert_eq!(c.eps_schedule, vec![0.4, 0.2, 0.1, 0.05]);
    }

    #[test]
    fn sections_and_dotted_keys() {
        let c = RunConfig::parse(
            "# reflected\nproblem.phi = indicator(0, inf)\n[numerics]\nsteps = 50 # coarse\npenalty = implicit\n",
        )
        .unwrap();
        assert_eq!(c.phi, ConvexSpec::indicator(0.0, f64::INFINITY).unwrap());
        assert_eq!(c.grid.steps, 50);
        assert_eq!(c.opts.penalty, PenaltyMode::Implicit);
        assert!(c.echo().contains(&"numerics.steps = 50".to_string()));
    }

    #[test]
    fn errors_carry_line_numbers() {
        let cases = [
            ("numerics.steps = 10\nnumerics.bogus = 1\n", 2),
            ("\n\nproblem.f = quartic\n", 3),
            ("numerics.steps = 10\nnumerics.steps = 20\n", 2),
            ("problem.phi\n", 1),
            ("numerics.lambda = 2\n", 1),
        ];
        for (text, want) in cases {
            match RunConfig::parse(text) {
                Err(Error::Config { line, .. }) => assert_eq!(line, want, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn set_overrides() {
        let mut c = RunConfig::default();
        c.set("numerics.seed", "42").unwrap();
        assert_eq!(c.grid.seed, 42);
        assert!(c.set("numerics.nope", "1").is_err());
    }
}
